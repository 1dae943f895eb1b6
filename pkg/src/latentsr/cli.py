"""Command-line interface.

Exit codes: 0 success, 2 usage error, 3 computation failure, 4 search
degeneracy (no valid candidate at all).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys

import numpy as np

from . import __version__
from . import config as C
from .checkpoint import load_checkpoint, save_checkpoint
from .cvae import LOG_COLUMNS, ModelConfig, TrainConfig, pad_len_for, train
from .datagen import OPERATOR_SETS, GenConfig, build_corpus, load_corpus, read_corpus_header
from .errors import (
    CheckpointError,
    DegenerateError,
    DiskError,
    GenerationTimeout,
    NonFiniteLoss,
    PrefixSyntaxError,
    RangeError,
    ShapeError,
)
from .expr import parse_prefix
from .optim import CmaConfig
from .pipeline import (
    export_latents,
    format_results,
    format_trace,
    interpolate,
    load_data_csv,
    metric_ranks,
    noise_bench,
    pareto_rank,
    reconstruction_eval,
    search,
    validity_rate,
)

EXIT_OK, EXIT_USAGE, EXIT_FAIL, EXIT_DEGENERATE = 0, 2, 3, 4


class UsageError(Exception):
    pass


# (flag dest, section, key); a flag left at None does not override the config
OVERRIDES = [
    ("ops", "gen", "ops"),
    ("family", "gen", "family"),
    ("max_tokens", "gen", "max_tokens"),
    ("max_vars", "gen", "max_vars"),
    ("samples", "gen", "m"),
    ("count", "gen", "count"),
    ("domain", "gen", "domain"),
    ("d", "model", "d"),
    ("d_n", "model", "d_n"),
    ("layers", "model", "n_layers"),
    ("heads", "model", "n_heads"),
    ("d_ff", "model", "d_ff"),
    ("epochs", "train", "epochs"),
    ("steps_per_epoch", "train", "steps_per_epoch"),
    ("batch_size", "train", "batch_size"),
    ("lr", "train", "base_lr"),
    ("warmup", "train", "warmup"),
    ("n_latent", "train", "n_latent"),
    ("pop", "cma", "s"),
    ("parents", "cma", "p"),
    ("top_k", "cma", "k"),
    ("step_size", "cma", "t"),
    ("generations", "cma", "max_generations"),
    ("omega", "cma", "omega"),
    ("split", "search", "split"),
    ("patience", "search", "patience"),
    ("record_time", "search", "record_time"),
    ("levels", "bench", "levels"),
    ("n_points", "bench", "n_points"),
    ("targets", "bench", "targets"),
    ("ratios", "interp", "ratios"),
    ("corpus", "io", "corpus"),
    ("checkpoint", "io", "checkpoint"),
    ("data", "io", "data"),
    ("data1", "io", "data1"),
    ("data2", "io", "data2"),
    ("resume", "io", "resume"),
    ("branch", "io", "branch"),
    ("limit", "io", "limit"),
    ("compare", "io", "compare"),
]


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="latentsr", description="Symbolic regression in a learned latent space.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_help):
        p.add_argument("--config", help="JSON config file, or an artifact whose embedded config to reuse")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=True, help=out_help)

    def cma_flags(p):
        p.add_argument("--pop", type=int, help="population size s")
        p.add_argument("--parents", type=int, help="top-p selected candidates")
        p.add_argument("--top-k", type=int, help="active latent dimensions k")
        p.add_argument("--step-size", type=float, help="initial step size t")
        p.add_argument("--generations", type=int)
        p.add_argument("--omega", type=float, help="complexity weight in the fitness")
        p.add_argument("--split", type=float, help="fraction of rows used for fitting")
        p.add_argument("--patience", type=int)
        p.add_argument("--record-time", action="store_const", const=True,
                       help="write wall-clock times (makes outputs run-dependent)")

    p = sub.add_parser("gen-corpus", help="generate a synthetic equation corpus")
    common(p, "corpus JSON-lines file")
    p.add_argument("--ops", choices=sorted(OPERATOR_SETS))
    p.add_argument("--family", choices=["exp", "trig", "log"])
    p.add_argument("--max-tokens", type=int)
    p.add_argument("--max-vars", type=int)
    p.add_argument("--samples", type=int, help="points per equation (m)")
    p.add_argument("--count", type=int)
    p.add_argument("--domain", type=float, nargs=2, metavar=("LO", "HI"))

    p = sub.add_parser("train", help="train the CVAE on a corpus")
    common(p, "checkpoint file (rewritten every epoch)")
    p.add_argument("--corpus")
    p.add_argument("--log", help="training log CSV (default: OUT.log.csv)")
    p.add_argument("--resume", help="checkpoint to continue from")
    for flag, typ in [("--d", int), ("--d-n", int), ("--layers", int), ("--heads", int), ("--d-ff", int),
                      ("--epochs", int), ("--steps-per-epoch", int), ("--batch-size", int), ("--lr", float),
                      ("--warmup", int), ("--n-latent", int)]:
        p.add_argument(flag, type=typ)

    p = sub.add_parser("search", help="search for an expression fitting a data CSV")
    common(p, "result JSON")
    p.add_argument("--checkpoint")
    p.add_argument("--data", help="CSV with header x0..x{D-1},y")
    p.add_argument("--trace", help="per-generation trace CSV (default: OUT.trace.csv)")
    cma_flags(p)

    p = sub.add_parser("interp", help="decode along the segment between two datasets' prior means")
    common(p, "report JSON")
    p.add_argument("--checkpoint")
    p.add_argument("--data1")
    p.add_argument("--data2")
    p.add_argument("--ratios", type=float, nargs="+")

    p = sub.add_parser("recon-eval", help="reconstruction edit distance on a corpus")
    common(p, "report CSV")
    p.add_argument("--checkpoint")
    p.add_argument("--corpus")
    p.add_argument("--branch", choices=["posterior", "prior", "both"])
    p.add_argument("--limit", type=int, help="use only the first N entries")

    p = sub.add_parser("bench", help="noise benchmark over planted targets")
    common(p, "per-run results CSV")
    p.add_argument("--checkpoint")
    p.add_argument("--targets", nargs="+", help='prefix expressions, e.g. "add x0 x1"')
    p.add_argument("--levels", type=float, nargs="+")
    p.add_argument("--n-points", type=int)
    p.add_argument("--compare", nargs="+", help="results CSVs of other methods for Pareto ranking")
    cma_flags(p)

    p = sub.add_parser("export-latents", help="CSV of prior means for a corpus")
    common(p, "latent CSV")
    p.add_argument("--checkpoint")
    p.add_argument("--corpus")
    p.add_argument("--limit", type=int)
    return ap


def resolve_config(args) -> dict:
    cfg = C.default_config()
    if args.config:
        cfg = C.merge(cfg, C.load_config_file(args.config))
    if args.seed is not None:
        cfg["seed"] = args.seed
    for dest, section, key in OVERRIDES:
        v = getattr(args, dest, None)
        if v is not None:
            cfg[section][key] = list(v) if isinstance(v, (list, tuple)) else v
    return cfg


def _need(cfg, key):
    v = cfg["io"].get(key)
    if v is None:
        raise UsageError(f"--{key} is required")
    return v


def _gen_config(cfg) -> GenConfig:
    g = cfg["gen"]
    kw = dict(max_tokens=g["max_tokens"], max_vars=g["max_vars"], m=g["m"], domain=tuple(g["domain"]),
              const_prob=g["const_prob"], unary_share=g["unary_share"], seed=cfg["seed"])
    if g["family"]:
        return GenConfig.for_family(g["family"], **kw)
    return GenConfig(ops=OPERATOR_SETS[g["ops"]], **kw)


def _cma_config(cfg) -> CmaConfig:
    return CmaConfig(**cfg["cma"], seed=cfg["seed"])


def _search_kw(cfg) -> dict:
    s = cfg["search"]
    return dict(split=s["split"], patience=s["patience"], min_improvement=s["min_improvement"],
                restarts=s["restarts"], record_time=bool(s["record_time"]))


def _model(cfg):
    return load_checkpoint(_need(cfg, "checkpoint")).params


# -- commands ------------------------------------------------------------------


def cmd_gen_corpus(cfg, args) -> int:
    header = C.make_header("gen-corpus", cfg)
    build_corpus(_gen_config(cfg), cfg["gen"]["count"], args.out, header=header)
    C.write_text_atomic(f"{args.out}.config.json", C.dumps(header) + "\n")
    print(f"wrote {cfg['gen']['count']} entries to {args.out}")
    return EXIT_OK


def cmd_train(cfg, args) -> int:
    entries = load_corpus(_need(cfg, "corpus"))
    if not entries:
        raise UsageError("corpus is empty")
    header = C.make_header("train", cfg)
    tc = TrainConfig(**cfg["train"], seed=cfg["seed"])
    params = adam = None
    if cfg["io"].get("resume"):
        ck = load_checkpoint(cfg["io"]["resume"])
        params, adam, mc = ck.params, ck.adam, ck.params.config
    else:
        m = dict(cfg["model"])
        corpus_header = read_corpus_header(cfg["io"]["corpus"]) or {}
        max_vars = corpus_header.get("config", {}).get("gen", {}).get("max_vars") or max(e.D for e in entries)
        m["pad_len"] = m["pad_len"] or pad_len_for([e.expr for e in entries])
        mc = ModelConfig(max_vars=max_vars, **m)
    log_path = args.log or f"{args.out}.log.csv"
    rows = []

    def on_epoch(p, a, epoch):
        save_checkpoint(args.out, p, a, tc, extra={"header": header})

    try:
        _, _, rows = train(entries, mc, tc, params=params, adam=adam, on_epoch=on_epoch)
    finally:
        buf = io.StringIO()
        buf.write(C.comment_line(header))
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r[0], repr(r[1]), repr(r[2]), repr(r[3]), repr(r[4])])
        C.write_text_atomic(log_path, buf.getvalue())
    print(f"trained to step {rows[-1][0] if rows else 'n/a'}; checkpoint {args.out}, log {log_path}")
    return EXIT_OK


def cmd_search(cfg, args) -> int:
    model = _model(cfg)
    X, y = load_data_csv(_need(cfg, "data"))
    res = search(model, X, y, _cma_config(cfg), **_search_kw(cfg))
    header = C.make_header("search", cfg)
    C.write_text_atomic(args.out, json.dumps({"header": header, "result": res.to_dict()}, sort_keys=True, indent=1)
                        + "\n")
    C.write_text_atomic(args.trace or f"{args.out}.trace.csv", C.comment_line(header) + format_trace(res.trace))
    if not res.ok:
        print("search found no valid expression", file=sys.stderr)
        return EXIT_DEGENERATE
    print(f"{res.expr}  r2={res.r2:.6g}  complexity={res.complexity}")
    return EXIT_OK


def cmd_interp(cfg, args) -> int:
    model = _model(cfg)
    d1 = load_data_csv(_need(cfg, "data1"))
    d2 = load_data_csv(_need(cfg, "data2"))
    points = interpolate(model, d1, d2, cfg["interp"]["ratios"])
    doc = {"header": C.make_header("interp", cfg), "points": [p.to_dict() for p in points],
           "validity_rate": validity_rate(points)}
    C.write_text_atomic(args.out, json.dumps(doc, sort_keys=True, indent=1) + "\n")
    for p in points:
        print(f"{p.ratio:g}\t{p.to_dict()['expr_text']}")
    return EXIT_OK


def cmd_recon(cfg, args) -> int:
    model = _model(cfg)
    entries = load_corpus(_need(cfg, "corpus"))
    if cfg["io"].get("limit"):
        entries = entries[: cfg["io"]["limit"]]
    branch = cfg["io"].get("branch") or "both"
    branches = ["posterior", "prior"] if branch == "both" else [branch]
    buf = io.StringIO()
    buf.write(C.comment_line(C.make_header("recon-eval", cfg)))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["branch", "mean", "std", "n"])
    for b in branches:
        r = reconstruction_eval(model, entries, b)
        w.writerow([b, repr(r.mean), repr(r.std), len(r.distances)])
        print(f"{b}: {r.mean:.4f} +- {r.std:.4f}")
    C.write_text_atomic(args.out, buf.getvalue())
    return EXIT_OK


def _read_results(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def cmd_bench(cfg, args) -> int:
    model = _model(cfg)
    if not cfg["bench"]["targets"]:
        raise UsageError("--targets is required")
    targets = [parse_prefix(t) for t in cfg["bench"]["targets"]]
    summary, runs = noise_bench(
        model, targets, cfg["bench"]["levels"], _cma_config(cfg),
        GenConfig(max_vars=model.config.max_vars, domain=tuple(cfg["gen"]["domain"])),
        n_points=cfg["bench"]["n_points"], seed=cfg["seed"], **_search_kw(cfg),
    )
    header = C.make_header("bench", cfg)
    C.write_text_atomic(args.out, C.comment_line(header) + format_results(runs))

    buf = io.StringIO()
    buf.write(C.comment_line(header))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["noise", "mean_r2", "mean_time_s", "mean_complexity"])
    for lvl, r2v, t, cx in summary:
        w.writerow([repr(lvl), repr(r2v), "" if t is None else repr(t), repr(cx)])
        print(f"noise={lvl:g}  r2={r2v:.4f}  complexity={cx:.2f}")
    C.write_text_atomic(f"{args.out}.summary.csv", buf.getvalue())

    rows = [r.__dict__ for r in runs]
    for path in cfg["io"].get("compare") or []:
        rows += _read_results(path)
    by_method: dict[str, list] = {}
    for r in rows:
        by_method.setdefault(str(r["method"]), []).append(r)

    def mean_of(rs, key, default):
        vals = [float(r[key]) for r in rs if r[key] not in ("", None)]
        vals = [v for v in vals if math.isfinite(v)]
        return float(np.mean(vals)) if vals else default

    metrics = {m: (mean_of(rs, "r2", -1e300), mean_of(rs, "complexity", 1e300), mean_of(rs, "time_s", 0.0))
               for m, rs in sorted(by_method.items())}
    report = pareto_rank(metric_ranks(metrics, (True, False, False)))
    buf = io.StringIO()
    buf.write(C.comment_line(header))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "r2_rank", "complexity_rank", "time_rank", "front"])
    for m, ranks in report.ranks.items():
        w.writerow([m, *[repr(v) for v in ranks], report.fronts[m]])
    C.write_text_atomic(f"{args.out}.pareto.csv", buf.getvalue())
    return EXIT_OK


def cmd_export(cfg, args) -> int:
    model = _model(cfg)
    entries = load_corpus(_need(cfg, "corpus"))
    if cfg["io"].get("limit"):
        entries = entries[: cfg["io"]["limit"]]
    C.write_text_atomic(args.out, C.comment_line(C.make_header("export-latents", cfg)) + export_latents(model, entries))
    print(f"wrote {len(entries)} latent rows to {args.out}")
    return EXIT_OK


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train": cmd_train,
    "search": cmd_search,
    "interp": cmd_interp,
    "recon-eval": cmd_recon,
    "bench": cmd_bench,
    "export-latents": cmd_export,
}


def main(argv=None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except (UsageError, FileNotFoundError, json.JSONDecodeError) as exc:
        parser.print_usage(sys.stderr)
        print(f"latentsr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLoss as exc:
        print(f"latentsr: training failed: {exc} (step {exc.step})", file=sys.stderr)
        return EXIT_FAIL
    except DegenerateError as exc:
        print(f"latentsr: search degenerate: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (GenerationTimeout, DiskError, CheckpointError, ShapeError, RangeError, PrefixSyntaxError, ValueError,
            OSError) as exc:
        print(f"latentsr: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
