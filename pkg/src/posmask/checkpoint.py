"""Single-file checkpoints: a zip of ``.npy`` arrays plus a JSON metadata entry.

Entries are written in sorted order with a fixed timestamp, so saving the same
state twice yields byte-identical files.
"""
import io
import json
import zipfile
from dataclasses import dataclass, field

import numpy as np

FORMAT = "posmask-checkpoint"
VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


@dataclass
class Checkpoint:
    meta: dict
    params: dict  # name -> ndarray
    optim: dict = field(default_factory=dict)  # "m/<name>", "v/<name>" -> ndarray

    @property
    def step(self):
        return self.meta.get("step", 0)


def _entry(name):
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    return info


def save_checkpoint(path, meta, params, optim=None):
    meta = dict(meta)
    meta["format"] = FORMAT
    meta["version"] = VERSION
    meta["shapes"] = {k: list(np.shape(v)) for k, v in params.items()}
    arrays = {f"params/{k}": v for k, v in params.items()}
    arrays.update({f"optim/{k}": v for k, v in (optim or {}).items()})
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr(_entry("meta.json"), json.dumps(meta, sort_keys=True, indent=1))
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            zf.writestr(_entry(name + ".npy"), buf.getvalue())


def load_checkpoint(path):
    try:
        zf = zipfile.ZipFile(path)
    except zipfile.BadZipFile:
        raise ValueError(f"{path}: not a {FORMAT} file") from None
    with zf:
        if "meta.json" not in zf.namelist():
            raise ValueError(f"{path}: not a {FORMAT} file")
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format") != FORMAT:
            raise ValueError(f"{path}: not a {FORMAT} file")
        if meta.get("version") != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        params, optim = {}, {}
        for name in zf.namelist():
            if not name.endswith(".npy"):
                continue
            arr = np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)
            key = name[: -len(".npy")]
            if key.startswith("params/"):
                params[key[len("params/"):]] = arr
            elif key.startswith("optim/"):
                optim[key[len("optim/"):]] = arr
    for k, shape in meta["shapes"].items():
        if list(params[k].shape) != shape:
            raise ValueError(f"{path}: parameter {k} has shape {params[k].shape}, expected {shape}")
    return Checkpoint(meta, params, optim)
