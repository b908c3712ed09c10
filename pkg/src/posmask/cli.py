"""``posmask`` command line: ingest, pretrain, finetune, evaluate, stats, gradcheck.

Failures print one ``error: <kind>: <message>`` line on stderr and exit 1;
usage errors exit 2.
"""
import argparse
import json
import shutil
import sys
from pathlib import Path

from posmask import __version__
from posmask.config import ConfigError, RunConfig, build_config, load_config, with_overrides

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class CliError(Exception):
    def __init__(self, kind, message):
        super().__init__(message)
        self.kind = kind


def _prepare_out_dir(path, force):
    out = Path(path)
    if out.exists() and (not out.is_dir() or any(out.iterdir())):
        if not force:
            raise CliError("exists", f"output {out} already exists; pass --force to overwrite")
        if out.is_dir():
            shutil.rmtree(out)
        else:
            out.unlink()
    out.mkdir(parents=True, exist_ok=True)
    return out


def _check_out_file(path, force):
    if path and Path(path).exists() and not force:
        raise CliError("exists", f"output {path} already exists; pass --force to overwrite")


def _require_dir(path, what):
    if not Path(path).is_dir():
        raise CliError("missing", f"{what} directory not found: {path}")


def _require_file(path, what):
    if not Path(path).is_file():
        raise CliError("missing", f"{what} file not found: {path}")


def _config(args):
    if getattr(args, "config", None):
        _require_file(args.config, "config")
        return load_config(args.config)
    return RunConfig()


def _echo(cfg, out=None):
    text = cfg.to_text()
    sys.stderr.write("# effective config\n" + text)
    if out is not None:
        (Path(out) / "config.cfg").write_text(text, encoding="utf-8")


# ------------------------------------------------------------------ subcommands


def cmd_ingest(args):
    from posmask.corpus import Vocab, build_manifest, ingest_directory, make_tokenizer, write_corpus

    _require_dir(args.input, "input")
    _require_file(args.vocab, "vocabulary")
    cfg = _config(args)
    corpus = {}
    for key in ("min_bytes", "grid", "max_len", "tokenizer"):
        value = getattr(args, key)
        if value is not None:
            corpus[key] = value
    cfg = with_overrides(cfg, corpus=corpus)
    out = _prepare_out_dir(args.out, args.force)
    _echo(cfg, out)
    c = cfg.corpus
    vocab = Vocab.load(args.vocab)
    tokenizer = make_tokenizer(c.tokenizer, vocab, c.lowercase)
    result = ingest_directory(args.input, tokenizer, min_bytes=c.min_bytes, m=c.grid,
                              max_len=c.max_len, workers=args.workers)
    write_corpus(result.pages, out / "corpus.jsonl")
    (out / "manifest.tsv").write_text(build_manifest(result.manifest), encoding="utf-8")
    vocab.save(out / "vocab.txt")
    info = {
        "grid": c.grid, "min_bytes": c.min_bytes, "max_len": c.max_len,
        "tokenizer": {"name": c.tokenizer, "lowercase": c.lowercase},
        "pages": len(result.pages),
        "dropped": sum(1 for r in result.manifest if not r.kept),
        "skipped_words": result.skipped_words,
    }
    (out / "ingest.json").write_text(json.dumps(info, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    print(f"ingested {info['pages']} page(s), dropped {info['dropped']}, skipped {info['skipped_words']} word(s)")
    return EXIT_OK


def cmd_pretrain(args):
    from dataclasses import replace

    from posmask.corpus import Vocab, read_corpus
    from posmask.training import TrainingHalted, pretrain

    _require_dir(args.corpus, "corpus")
    corpus_dir = Path(args.corpus)
    for name in ("corpus.jsonl", "vocab.txt"):
        _require_file(corpus_dir / name, "corpus")
    cfg = _config(args)
    train = {}
    if args.seed is not None:
        train["seed"] = args.seed
    if args.max_steps is not None:
        train["max_steps"] = args.max_steps
    vocab = Vocab.load(corpus_dir / "vocab.txt")
    info_path = corpus_dir / "ingest.json"
    info = json.loads(info_path.read_text()) if info_path.exists() else {}
    model = {}
    if "model.vocab_size" not in cfg.explicit:
        model["vocab_size"] = len(vocab)
    if "grid" in info and "model.grid_max" not in cfg.explicit:
        model["grid_max"] = info["grid"]
    cfg = with_overrides(cfg, train=train, model=model)
    if info.get("grid", cfg.model.grid_max) != cfg.model.grid_max:
        raise CliError("config", f"model.grid_max {cfg.model.grid_max} != corpus grid {info['grid']}")
    out = _prepare_out_dir(args.out, args.force)
    _echo(cfg, out)
    pages = read_corpus(corpus_dir / "corpus.jsonl")
    tokenizer = info.get("tokenizer", {"name": cfg.corpus.tokenizer, "lowercase": cfg.corpus.lowercase})
    try:
        result = pretrain(pages, vocab, cfg.model, cfg.mask, cfg.train, out_dir=out, tokenizer=tokenizer)
    except TrainingHalted as exc:
        raise CliError("halted", f"{exc} (last good checkpoint: {exc.last_checkpoint})") from None
    last = result.runlog.steps()[-1]
    print(f"pretrained {last['step'] + 1} step(s); final loss {last['loss']:.6f}; checkpoint {result.checkpoint}")
    return EXIT_OK


def _tokenizer_from_meta(meta):
    from posmask.corpus import Vocab, make_tokenizer

    tok = meta["tokenizer"]
    return make_tokenizer(tok["name"], Vocab(meta["vocab"]), tok.get("lowercase", True))


def cmd_finetune(args):
    from posmask.checkpoint import load_checkpoint
    from posmask.finetune import finetune_one, load_funsd
    from posmask.training import RunLog, TrainConfig

    _require_file(args.checkpoint, "checkpoint")
    _require_dir(args.data, "data")
    cfg = _config(args)
    ft = {}
    for key in ("runs", "epochs", "seed", "learning_rate", "batch_size"):
        value = getattr(args, key)
        if value is not None:
            ft[key] = value
    cfg = with_overrides(cfg, finetune=ft)
    f = cfg.finetune
    ck = load_checkpoint(args.checkpoint)
    model_cfg = ck.meta["model"]
    pages = load_funsd(args.data, _tokenizer_from_meta(ck.meta), m=model_cfg["grid_max"],
                       max_len=model_cfg["max_seq_len"], include_other=f.include_other)
    out = _prepare_out_dir(args.out, args.force)
    _echo(cfg, out)
    tcfg = TrainConfig(learning_rate=f.learning_rate, batch_size=f.batch_size, seed=f.seed,
                       grad_clip_norm=cfg.train.grad_clip_norm, weight_decay=cfg.train.weight_decay,
                       beta1=cfg.train.beta1, beta2=cfg.train.beta2, adam_eps=cfg.train.adam_eps)
    for r in range(f.runs):
        run_dir = out / f"run{r}"
        run_dir.mkdir()
        log = RunLog(run_dir / "runlog.jsonl")
        model, _ = finetune_one(ck, pages, epochs=f.epochs, seed=f.seed + r, train_config=tcfg,
                                include_other=f.include_other, on_step=lambda rec: log.append(rec))
        model.save(run_dir / "model.npz")
        print(f"run {r} (seed {f.seed + r}): {len(log.records)} step(s) -> {run_dir / 'model.npz'}")
    return EXIT_OK


def _model_files(paths):
    files = []
    for p in map(Path, paths):
        if p.is_dir():
            found = sorted(p.glob("run*/model.npz"))
            if not found:
                raise CliError("missing", f"no run*/model.npz under {p}")
            files += found
        elif p.is_file():
            files.append(p)
        else:
            raise CliError("missing", f"model not found: {p}")
    return files


def cmd_evaluate(args):
    from posmask.finetune import MetricsReport, RunScore, TaggerModel, evaluate, load_funsd

    _require_dir(args.data, "data")
    _check_out_file(args.out, args.force)
    report = MetricsReport(args.system or "")
    cache = {}
    for r, path in enumerate(_model_files(args.model)):
        model = TaggerModel.load(path)
        key = (tuple(model.vocab), json.dumps(model.tokenizer, sort_keys=True), model.config.grid_max,
               model.config.max_seq_len, model.include_other)
        if key not in cache:
            cache[key] = load_funsd(args.data, model.make_tokenizer(), m=model.config.grid_max,
                                    max_len=model.config.max_seq_len, include_other=model.include_other)
        s = evaluate(model, cache[key])
        report.runs.append(RunScore(r, model.seed, s.precision, s.recall, s.f1))
    if not report.system:
        report.system = Path(args.model[0]).name
    text = report.to_text()
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    return EXIT_OK


def cmd_stats(args):
    from posmask.finetune import MetricsReport
    from posmask.stats import anova_oneway, tukey_hsd

    for p in args.reports:
        _require_file(p, "report")
    _check_out_file(args.out, args.force)
    reports = [MetricsReport.load(p) for p in args.reports]
    groups = [r.f1_scores for r in reports]
    names = [r.system or Path(p).stem for r, p in zip(reports, args.reports)]
    try:
        a = anova_oneway(groups)
        t = tukey_hsd(groups, alpha=args.alpha)
    except ValueError as exc:
        raise CliError("stats", str(exc)) from None
    lines = ["system\tn\tmean_f1\tstd_f1"]
    for name, r in zip(names, reports):
        lines.append(f"{name}\t{len(r.runs)}\t{r.mean('f1')!r}\t{r.std('f1')!r}")
    lines.append("")
    lines.append("anova\tF\tdf_between\tdf_within\tp\tdegenerate")
    lines.append(f"anova\t{a.f!r}\t{a.df_between}\t{a.df_within}\t{a.p!r}\t{str(a.degenerate).lower()}")
    lines.append("")
    lines.append(f"tukey\tgroup1\tgroup2\tmeandiff\tq\tp_adj\tlower\tupper\treject(alpha={args.alpha})")
    for pr in t.pairs:
        lines.append(f"tukey\t{names[pr.i]}\t{names[pr.j]}\t{pr.mean_diff!r}\t{pr.q!r}\t{pr.p_adj!r}"
                     f"\t{pr.lower!r}\t{pr.upper!r}\t{str(pr.reject).lower()}")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    return EXIT_OK


def cmd_gradcheck(args):
    from dataclasses import replace

    from posmask.gradcheck import gradcheck_config
    from posmask.model import SYSTEMS

    cfg = _config(args)
    if args.systems == "config":
        configs = [("config", cfg.model)]
    else:
        names = ["baseline", "x1_ce", "x1_reg", "full_ce", "full_reg"] if args.systems == "all" else args.systems.split(",")
        unknown = [n for n in names if n not in SYSTEMS]
        if unknown:
            raise CliError("config", f"unknown system(s) {unknown}")
        configs = [(n, replace(cfg.model, **SYSTEMS[n])) for n in names]
    worst = 0.0
    for name, mcfg in configs:
        report = gradcheck_config(mcfg, seed=args.seed, seq_len=min(args.seq_len, mcfg.max_seq_len),
                                  max_elements=args.max_elements)
        worst = max(worst, report.max_rel_err)
        n = sum(c.size for c in report.checks)
        print(f"{name}\tparams={len(report.checks)}\telements={n}\tmax_rel_err={report.max_rel_err:.3e}")
    ok = worst < args.tol
    print(f"max rel. err = {worst:.3e} ({'PASS' if ok else 'FAIL'} at tol {args.tol:g})")
    return EXIT_OK if ok else EXIT_FAIL


# ------------------------------------------------------------------ parser


def build_parser():
    p = argparse.ArgumentParser(prog="posmask", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"posmask {__version__}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    def common(sp, out=True):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--workers", type=int, default=1, help="page-parallel workers (ingest only)")
        if out:
            sp.add_argument("--force", action="store_true", help="overwrite an existing --out")

    s = sub.add_parser("ingest", help="hOCR directory -> corpus + manifest")
    s.add_argument("--input", required=True)
    s.add_argument("--vocab", required=True)
    s.add_argument("--min-bytes", dest="min_bytes", type=int)
    s.add_argument("--grid", type=int)
    s.add_argument("--max-len", dest="max_len", type=int)
    s.add_argument("--tokenizer", choices=["wordpiece", "whitespace"])
    s.add_argument("--out", required=True)
    common(s)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("pretrain", help="masked pre-training on an ingested corpus")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--max-steps", dest="max_steps", type=int)
    common(s)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("finetune", help="fine-tune entity taggers from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--runs", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--lr", dest="learning_rate", type=float)
    s.add_argument("--batch-size", dest="batch_size", type=int)
    s.add_argument("--out", required=True)
    common(s)
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("evaluate", help="entity-level P/R/F1 of fine-tuned models")
    s.add_argument("--model", required=True, nargs="+", help="model.npz files or a finetune output dir")
    s.add_argument("--data", required=True)
    s.add_argument("--system", help="system name recorded in the report")
    s.add_argument("--out", help="also write the report here")
    common(s)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("stats", help="one-way ANOVA + Tukey HSD over metrics reports")
    s.add_argument("--reports", required=True, nargs="+")
    s.add_argument("--alpha", type=float, default=0.05)
    s.add_argument("--out")
    common(s)
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("gradcheck", help="finite-difference check of every parameter gradient")
    s.add_argument("--systems", default="all",
                   help="'all', 'config' (model section as given) or comma-separated system names")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--seq-len", dest="seq_len", type=int, default=16)
    s.add_argument("--max-elements", dest="max_elements", type=int,
                   help="check a random subset of this many entries per parameter")
    s.add_argument("--tol", type=float, default=1e-4)
    common(s, out=False)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc.kind}: {exc}", file=sys.stderr)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
    except (ValueError, FileNotFoundError, IndexError) as exc:
        print(f"error: {type(exc).__name__}: {exc}".replace("\n", " "), file=sys.stderr)
    return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
