"""Entity tagging on FUNSD-style forms: loading, fine-tuning, decoding and scoring."""
import json
import logging
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from posmask import numerics as nx
from posmask.checkpoint import load_checkpoint, save_checkpoint
from posmask.corpus import PageDocument, RawWord, Vocab, make_tokenizer, normalize_box
from posmask.model import IGNORE, ModelConfig, add_classifier_head, embed, encode, init_params, token_classifier_logits
from posmask.training import AdamState, SpecialIds, TrainConfig, code_version, linear_schedule, optimizer_update

log = logging.getLogger(__name__)

ENTITY_LABELS = ("header", "question", "answer", "other")


def tag_set(include_other=True):
    tags = ["O"]
    for lab in ENTITY_LABELS:
        if lab == "other" and not include_other:
            continue
        tags += [f"B-{lab.upper()}", f"I-{lab.upper()}"]
    return tags


@dataclass(frozen=True)
class EntitySpan:
    label: str
    start: int
    end: int  # inclusive

    def __post_init__(self):
        if self.start > self.end:
            raise ValueError(f"span start {self.start} after end {self.end}")


@dataclass
class TaggedPage:
    page: PageDocument
    labels: np.ndarray  # per sub-token tag index, IGNORE on specials and continuations
    word_tokens: np.ndarray  # sub-token index of each scored word's first piece
    word_tags: list  # gold BIO tag per scored word
    name: str = ""

    @property
    def gold_spans(self):
        return decode_entities(self.word_tags)


# ------------------------------------------------------------------ loading


def _page_size(data, path):
    if "page_size" in data:
        w, h = data["page_size"]
        return int(w), int(h)
    for ext in (".png", ".jpg", ".jpeg", ".tif", ".tiff"):
        img = path.parent.parent / "images" / (path.stem + ext)
        if img.exists():
            from PIL import Image

            with Image.open(img) as im:
                return im.size
    boxes = [w["box"] for ent in data.get("form", []) for w in ent.get("words", []) if "box" in w]
    if not boxes:
        return 1, 1
    log.warning("%s: no page size or image; using word extents", path.name)
    return max(b[2] for b in boxes) + 1, max(b[3] for b in boxes) + 1


def tag_words(entities, include_other=True):
    """Flatten ``[(label, [RawWord, ...]), ...]`` into words and BIO tags."""
    words, tags = [], []
    for label, ents in entities:
        for i, w in enumerate(ents):
            words.append(w)
            if label == "other" and not include_other:
                tags.append("O")
            else:
                tags.append(("B-" if i == 0 else "I-") + label.upper())
    return words, tags


def build_tagged_page(words, tags, tokenizer, width, height, *, m=1000, max_len=512,
                      include_other=True, name=""):
    """Tokenize words; the first piece of each word carries its tag, continuations are ignored."""
    vocab = tokenizer.vocab
    index = {t: i for i, t in enumerate(tag_set(include_other))}
    ids, boxes, labels, word_tokens, word_tags = [vocab.cls_id], [(0, 0, 0, 0)], [IGNORE], [], []
    for word, tag in zip(words, tags):
        pieces = tokenizer.tokenize_word(word.text)
        if len(ids) + len(pieces) > max_len - 1:
            break
        box = normalize_box(word.box, width, height, m).as_tuple()
        word_tokens.append(len(ids))
        word_tags.append(tag)
        for j, tid in enumerate(pieces):
            ids.append(tid)
            boxes.append(box)
            labels.append(index[tag] if j == 0 else IGNORE)
    ids.append(vocab.sep_id)
    boxes.append((m, m, m, m))
    labels.append(IGNORE)
    page = PageDocument(name, width, height, np.array(ids, dtype=np.int64), np.array(boxes, dtype=np.int64))
    return TaggedPage(page, np.array(labels, dtype=np.int64), np.array(word_tokens, dtype=np.int64),
                      word_tags, name)


def load_funsd_file(path, tokenizer, *, m=1000, max_len=512, include_other=True):
    path = Path(path)
    data = json.loads(path.read_text(encoding="utf-8"))
    width, height = _page_size(data, path)
    entities = []
    for ent in data.get("form", []):
        label = str(ent.get("label", "")).lower()
        if label not in ENTITY_LABELS:
            raise ValueError(f"{path.name}: unknown entity label {ent.get('label')!r}")
        raw = []
        for w in ent.get("words", []):
            if "box" not in w or len(w["box"]) != 4:
                raise ValueError(f"{path.name}: word {w.get('text')!r} has no bounding box")
            if str(w.get("text", "")).strip():
                raw.append(RawWord(w["text"].strip(), tuple(int(v) for v in w["box"])))
        if not raw:
            log.warning("%s: entity %s has no words; skipped", path.name, ent.get("id"))
            continue
        entities.append((label, raw))
    words, tags = tag_words(entities, include_other)
    return build_tagged_page(words, tags, tokenizer, width, height, m=m, max_len=max_len,
                             include_other=include_other, name=path.stem)


def funsd_files(data_dir):
    data_dir = Path(data_dir)
    ann = data_dir / "annotations"
    root = ann if ann.is_dir() else data_dir
    return sorted(root.glob("*.json"))


def load_funsd(data_dir, tokenizer, **kwargs):
    files = funsd_files(data_dir)
    if not files:
        raise FileNotFoundError(f"no FUNSD annotation files under {data_dir}")
    return [load_funsd_file(f, tokenizer, **kwargs) for f in files]


# ------------------------------------------------------------------ decoding and scoring


def decode_entities(tags):
    """BIO tags to spans; a stray ``I-X`` opens a new X entity."""
    spans = []
    label = start = None
    for i, tag in enumerate(list(tags) + ["O"]):
        prefix, _, kind = tag.partition("-")
        if label is not None and (prefix != "I" or kind != label):
            spans.append(EntitySpan(label, start, i - 1))
            label = None
        if prefix in ("B", "I") and label is None:
            label, start = kind, i
    return spans


def encode_entities(spans, length):
    tags = ["O"] * length
    for s in spans:
        tags[s.start] = f"B-{s.label}"
        for i in range(s.start + 1, s.end + 1):
            tags[i] = f"I-{s.label}"
    return tags


@dataclass
class Scores:
    tp: int
    n_pred: int
    n_gold: int

    @property
    def precision(self):
        return self.tp / self.n_pred if self.n_pred else 0.0

    @property
    def recall(self):
        return self.tp / self.n_gold if self.n_gold else 0.0

    @property
    def f1(self):
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r > 0 else 0.0


def score_entities(gold_pages, pred_pages, include_other=True):
    """Exact-match entity scores micro-averaged over pages (lists of span lists)."""
    if len(gold_pages) != len(pred_pages):
        raise ValueError("gold and predicted page counts differ")
    tp = n_pred = n_gold = 0
    for gold, pred in zip(gold_pages, pred_pages):
        if not include_other:
            gold = [s for s in gold if s.label != "OTHER"]
            pred = [s for s in pred if s.label != "OTHER"]
        gset = set(gold)
        pset = set(pred)
        tp += len(gset & pset)
        n_pred += len(pset)
        n_gold += len(gset)
    return Scores(tp, n_pred, n_gold)


# ------------------------------------------------------------------ metrics reports


@dataclass
class RunScore:
    run: int
    seed: int
    precision: float
    recall: float
    f1: float


@dataclass
class MetricsReport:
    system: str
    runs: list = field(default_factory=list)

    def _col(self, name):
        return [getattr(r, name) for r in self.runs]

    def mean(self, name):
        return statistics.fmean(self._col(name))

    def std(self, name):
        vals = self._col(name)
        return statistics.stdev(vals) if len(vals) > 1 else 0.0

    @property
    def f1_scores(self):
        return self._col("f1")

    def to_text(self):
        lines = [f"# system\t{self.system}", "run\tseed\tprecision\trecall\tf1"]
        for r in self.runs:
            lines.append(f"{r.run}\t{r.seed}\t{r.precision!r}\t{r.recall!r}\t{r.f1!r}")
        if self.runs:
            lines.append("mean\t-\t" + "\t".join(repr(self.mean(c)) for c in ("precision", "recall", "f1")))
            lines.append("std\t-\t" + "\t".join(repr(self.std(c)) for c in ("precision", "recall", "f1")))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        system, runs = "", []
        for line in text.splitlines():
            if line.startswith("# system"):
                system = line.split("\t", 1)[1]
                continue
            if not line or line.startswith("#") or line.startswith("run\t"):
                continue
            parts = line.split("\t")
            if parts[0] in ("mean", "std"):
                continue
            runs.append(RunScore(int(parts[0]), int(parts[1]), float(parts[2]), float(parts[3]), float(parts[4])))
        return cls(system, runs)

    def save(self, path):
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path):
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


# ------------------------------------------------------------------ fine-tuning


@dataclass
class TaggerModel:
    config: ModelConfig
    params: dict  # name -> Node
    tags: list
    seed: int
    vocab: list
    tokenizer: dict
    include_other: bool = True

    def save(self, path):
        meta = {
            "kind": "finetune", "model": self.config.to_dict(), "tags": self.tags, "seed": self.seed,
            "vocab": self.vocab, "tokenizer": self.tokenizer, "include_other": self.include_other,
            "step": 0, "code_version": code_version(),
        }
        save_checkpoint(path, meta, {k: p.value for k, p in self.params.items()})

    @classmethod
    def load(cls, path):
        ck = load_checkpoint(path)
        if ck.meta.get("kind") != "finetune":
            raise ValueError(f"{path}: not a fine-tuned tagger checkpoint")
        params = {k: nx.parameter(v, k) for k, v in ck.params.items()}
        return cls(ModelConfig.from_dict(ck.meta["model"]), params, ck.meta["tags"], ck.meta["seed"],
                   ck.meta["vocab"], ck.meta["tokenizer"], ck.meta.get("include_other", True))

    def make_tokenizer(self):
        return make_tokenizer(self.tokenizer["name"], Vocab(self.vocab), self.tokenizer.get("lowercase", True))


def _tagging_batch(pages, specials, max_len):
    T = min(max(len(tp.page) for tp in pages), max_len)
    B = len(pages)
    ids = np.full((B, T), specials.pad, dtype=np.int64)
    boxes = np.zeros((B, T, 4), dtype=np.int64)
    attn = np.zeros((B, T), dtype=bool)
    labels = np.full((B, T), IGNORE, dtype=np.int64)
    for b, tp in enumerate(pages):
        n = min(len(tp.page), T)
        ids[b, :n] = tp.page.token_ids[:n]
        boxes[b, :n] = tp.page.boxes[:n]
        attn[b, :n] = True
        labels[b, :n] = tp.labels[:n]
    return ids, boxes, attn, labels


def tagging_logits(model, ids, boxes, attn, rng=None):
    x = embed(model.params, model.config, ids, boxes)
    h = encode(model.params, model.config, x, attn, rng)
    return token_classifier_logits(model.params, h)


def tagger_from_checkpoint(ck, num_tags, seed):
    """Encoder weights from a pre-training checkpoint plus a fresh tagging head."""
    config = ModelConfig.from_dict(ck.meta["model"])
    rng = np.random.default_rng([seed, 3])
    fresh = init_params(config, rng)
    params = {}
    for name, node in fresh.items():
        if name.startswith(("mlm.", "pm.")):
            continue
        if name not in ck.params:
            raise ValueError(f"checkpoint lacks parameter {name}")
        params[name] = nx.parameter(ck.params[name].copy(), name)
    add_classifier_head(params, config, num_tags, rng)
    return params, config


def finetune_one(ck, train_pages, *, epochs, seed, train_config, include_other=True, on_step=None):
    tags = tag_set(include_other)
    max_label = max((int(tp.labels.max()) for tp in train_pages), default=0)
    if max_label >= len(tags):
        raise ValueError(f"training labels use {max_label + 1} tags but the head has {len(tags)}")
    params, config = tagger_from_checkpoint(ck, len(tags), seed)
    model = TaggerModel(config, params, tags, seed, ck.meta["vocab"], ck.meta["tokenizer"], include_other)
    if epochs == 0 or not train_pages:
        return model, []
    vocab = Vocab(ck.meta["vocab"])
    specials = SpecialIds.from_vocab(vocab)
    rng = np.random.default_rng([seed, 4])
    drop_rng = np.random.default_rng([seed, 5]) if config.dropout > 0 else None
    bs = train_config.batch_size
    per_epoch = math.ceil(len(train_pages) / bs)
    total = epochs * per_epoch
    state = AdamState.zeros({k: p.value for k, p in params.items()})
    history, step = [], 0
    for epoch in range(epochs):
        order = rng.permutation(len(train_pages))
        for start in range(0, len(train_pages), bs):
            batch = [train_pages[i] for i in order[start:start + bs]]
            ids, boxes, attn, labels = _tagging_batch(batch, specials, config.max_seq_len)
            for p in params.values():
                p.zero_grad()
            loss = nx.softmax_cross_entropy(tagging_logits(model, ids, boxes, attn, drop_rng), labels.ravel())
            if not math.isfinite(loss.item()):
                raise FloatingPointError(f"non-finite fine-tuning loss at step {step}")
            nx.backward(loss)
            lr = linear_schedule(step, total, train_config.learning_rate)
            state, _, norm = optimizer_update(params, state, lr, train_config)
            rec = {"type": "step", "step": step, "epoch": epoch, "lr": lr, "loss": loss.item(), "grad_norm": norm}
            history.append(rec)
            if on_step:
                on_step(rec)
            step += 1
    return model, history


def finetune(ck, train_pages, *, epochs=100, runs=5, seed=0, train_config=None, include_other=True):
    """Fine-tune ``runs`` independent taggers with seeds ``seed .. seed + runs - 1``."""
    if isinstance(ck, (str, Path)):
        ck = load_checkpoint(ck)
    train_config = train_config or TrainConfig(batch_size=25)
    out = []
    for r in range(runs):
        model, history = finetune_one(ck, train_pages, epochs=epochs, seed=seed + r,
                                      train_config=train_config, include_other=include_other)
        out.append((model, history))
    return out


def predict_tags(model, pages, batch_size=25):
    """Predicted BIO tag per scored word, one list per page."""
    vocab = Vocab(model.vocab)
    specials = SpecialIds.from_vocab(vocab)
    out = []
    for start in range(0, len(pages), batch_size):
        chunk = pages[start:start + batch_size]
        ids, boxes, attn, _ = _tagging_batch(chunk, specials, model.config.max_seq_len)
        logits = tagging_logits(model, ids, boxes, attn).value.reshape(len(chunk), ids.shape[1], -1)
        for b, tp in enumerate(chunk):
            pred = logits[b].argmax(axis=-1)
            idx = tp.word_tokens[tp.word_tokens < ids.shape[1]]
            out.append([model.tags[int(pred[i])] for i in idx])
    return out


def evaluate(model, pages, include_other=None):
    include_other = model.include_other if include_other is None else include_other
    preds = predict_tags(model, pages)
    gold = [tp.gold_spans for tp in pages]
    return score_entities(gold, [decode_entities(p) for p in preds], include_other=include_other)
