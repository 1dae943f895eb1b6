"""End-to-end search and the evaluation protocols built on it."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .cvae import DiagGaussian, ModelParams, encode_data, encode_posterior, encode_prior, greedy_decode
from .datagen import GenConfig, add_noise, sample_dataset
from .encoding import encode_equation
from .errors import AllRestartsFailed, DegenerateError, PrefixSyntaxError
from .expr import (
    Expr,
    canonicalize_constants,
    complexity,
    constants,
    edit_distance,
    evaluate_masked,
    from_prefix,
    prefix_text,
    strip_special,
    to_prefix,
    to_text,
    variables,
)
from .optim import (
    CmaConfig,
    bfgs_fit_constants,
    cma_init,
    cma_sample,
    cma_update,
    fitness,
    r2,
    rank_candidates,
    widen,
)
from .seeding import substream

DEFAULT_RATIOS = (0.0, 0.25, 0.5, 0.75, 1.0)
NOISE_LEVELS = (0.0, 0.001, 0.01, 0.1)
TRACE_COLUMNS = ("gen", "best_fitness", "best_r2", "best_complexity", "mean_sigma", "active_dims")
RESULT_COLUMNS = ("method", "dataset", "noise", "r2", "time_s", "complexity", "seed")
METHOD_NAME = "latentsr"


# -- data handling ------------------------------------------------------------------


@dataclass(frozen=True)
class DataSplit:
    """Fit and held-out parts; only ``fit`` is ever given to fitting or ranking."""

    X_fit: np.ndarray
    y_fit: np.ndarray
    X_held: np.ndarray
    y_held: np.ndarray


def split_data(X, y, frac: float, rng: np.random.Generator) -> DataSplit:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if not 0 < frac < 1:
        raise ValueError("split fraction must lie in (0, 1)")
    n = len(y)
    if n < 4 or X.shape[0] != n:
        raise ValueError("need at least 4 matching rows to split")
    n_fit = min(n - 2, max(2, int(round(frac * n))))
    perm = rng.permutation(n)
    a, b = np.sort(perm[:n_fit]), np.sort(perm[n_fit:])
    return DataSplit(X[a], y[a], X[b], y[b])


def load_data_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Read a CSV with header ``x0..x{D-1},y``."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path} is empty")
    header = [h.strip() for h in rows[0]]
    D = len(header) - 1
    if D < 1 or header != [f"x{i}" for i in range(D)] + ["y"]:
        raise ValueError(f"{path}: header must be x0..x{{D-1}},y, got {header}")
    data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ValueError(f"{path} has no data rows")
    return data[:, :D], data[:, D]


def write_data_csv(path, X, y) -> None:
    X = np.asarray(X)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{i}" for i in range(X.shape[1])] + ["y"])
        for row, t in zip(X, y):
            w.writerow([repr(float(v)) for v in row] + [repr(float(t))])


# -- localization and candidate scoring -----------------------------------------


def localize(model: ModelParams, X, y) -> DiagGaussian:
    """Prior-branch Gaussian for a dataset: the starting search distribution."""
    return encode_prior(model, encode_data(model, X, y))


@dataclass
class Candidate:
    expr: Expr | None
    fitness: float
    r2: float
    complexity: int
    tokens: tuple[str, ...] = ()

    @property
    def valid(self) -> bool:
        return self.expr is not None and math.isfinite(self.fitness)


INVALID = Candidate(None, -math.inf, -math.inf, 0)


def parse_decoded(tokens: Sequence[str], n_vars: int) -> Expr | None:
    try:
        e = from_prefix(list(tokens))
    except PrefixSyntaxError:
        return None
    if any(v >= n_vars for v in variables(e)):
        return None
    return e


class CandidateScorer:
    """Decode, refit constants and score latents on the fit split, with a skeleton cache."""

    def __init__(self, model: ModelParams, split: DataSplit, omega: float, seed: int, restarts: int = 3):
        self.model = model
        self.split = split
        self.omega = omega
        self.seed = seed
        self.restarts = restarts
        self.n_vars = split.X_fit.shape[1]
        self.cache: dict[str, Candidate] = {}

    def score_expr(self, e: Expr | None, tokens=()) -> Candidate:
        if e is None:
            return Candidate(None, -math.inf, -math.inf, 0, tuple(tokens))
        skel = canonicalize_constants(e)
        key = prefix_text(skel)
        hit = self.cache.get(key)
        if hit is not None:
            return Candidate(hit.expr, hit.fitness, hit.r2, hit.complexity, tuple(tokens))
        X, y = self.split.X_fit, self.split.y_fit
        try:
            fit = bfgs_fit_constants(
                skel, X, y,
                rng=substream(self.seed, "bfgs", len(self.cache)),
                restarts=self.restarts,
                extra_starts=[constants(e)],
            )
            yhat, ok = evaluate_masked(fit.expr, X)
            score = r2(y, yhat) if ok.all() else -math.inf
            cand = Candidate(fit.expr, fitness(score, complexity(fit.expr), self.omega), score, complexity(fit.expr))
        except AllRestartsFailed:
            cand = Candidate(None, -math.inf, -math.inf, 0)
        if not math.isfinite(cand.fitness):
            cand = Candidate(None, -math.inf, -math.inf, 0)
        self.cache[key] = cand
        return Candidate(cand.expr, cand.fitness, cand.r2, cand.complexity, tuple(tokens))

    def score_latents(self, zs: np.ndarray) -> list[Candidate]:
        out = greedy_decode(self.model, zs)
        return [self.score_expr(parse_decoded(toks, self.n_vars), toks) for toks in out.tokens]


# -- search --------------------------------------------------------------------------


@dataclass
class SearchResult:
    ok: bool
    expr: str | None  # infix text
    prefix: list[str] | None
    r2: float  # held-out
    fit_r2: float
    complexity: int
    fitness: float
    time_s: float | None
    seed: int
    generations: int
    trace: list[tuple] = field(default_factory=list)
    reason: str = ""

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "expr": self.expr,
            "prefix": self.prefix,
            "r2": _json_float(self.r2),
            "fit_r2": _json_float(self.fit_r2),
            "complexity": self.complexity,
            "fitness": _json_float(self.fitness),
            "time_s": self.time_s,
            "seed": self.seed,
            "generations": self.generations,
            "reason": self.reason,
        }


def _json_float(v: float):
    return v if math.isfinite(v) else ("-inf" if v < 0 else ("inf" if v > 0 else "nan"))


def held_out_r2(expr: Expr, split: DataSplit) -> float:
    yhat, ok = evaluate_masked(expr, split.X_held)
    return r2(split.y_held, yhat) if ok.all() else -math.inf


def search(
    model: ModelParams,
    X,
    y,
    cfg: CmaConfig,
    split: float = 0.75,
    *,
    patience: int = 20,
    min_improvement: float = 1e-6,
    restarts: int = 3,
    record_time: bool = True,
) -> SearchResult:
    """Prior-branch localization followed by CMA-ES over the latent space.

    Every candidate is decoded greedily, its constants refit by BFGS on the
    fit split, and ranked by fitness there; the returned R² is measured on
    the held-out split only.
    """
    t0 = time.perf_counter()
    data = split_data(X, y, split, substream(cfg.seed, "split"))
    scorer = CandidateScorer(model, data, cfg.omega, cfg.seed, restarts)
    prior = localize(model, data.X_fit, data.y_fit)
    state = cma_init(prior, cfg)
    rng = substream(cfg.seed, "cma")

    best = scorer.score_latents(prior.mean[None])[0]
    trace: list[tuple] = []
    stale = 0
    reason = ""
    gen = 0
    for gen in range(1, cfg.max_generations + 1):
        for _ in range(cfg.max_widen + 1):
            zs = cma_sample(state, cfg.s, rng)
            cands = scorer.score_latents(zs)
            if any(c.valid for c in cands):
                break
            state = widen(state)
        else:
            reason = "degenerate"
            gen -= 1
            break
        fits = [c.fitness for c in cands]
        order = rank_candidates(zs, fits, [c.complexity for c in cands])
        top = cands[order[0]]
        if top.fitness > best.fitness + min_improvement or not best.valid:
            best, stale = top, 0
        else:
            stale += 1
        act = state.active
        trace.append((
            gen,
            best.fitness,
            best.r2,
            best.complexity,
            float(np.mean(state.sigma * np.sqrt(state.var[act]))),
            int(act.size),
        ))
        try:
            state = cma_update(state, [(zs[i], fits[i]) for i in order], cfg)
        except DegenerateError:
            reason = "degenerate"
            break
        if stale >= patience:
            reason = "converged"
            break
    else:
        reason = "max_generations"
    elapsed = time.perf_counter() - t0 if record_time else None
    if not best.valid:
        return SearchResult(False, None, None, -math.inf, -math.inf, 0, -math.inf, elapsed, cfg.seed, gen, trace,
                            "no valid candidate")
    return SearchResult(
        True,
        to_text(best.expr),
        to_prefix(best.expr),
        held_out_r2(best.expr, data),
        best.r2,
        best.complexity,
        best.fitness,
        elapsed,
        cfg.seed,
        gen,
        trace,
        reason,
    )


def format_trace(trace: Sequence[tuple]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for row in trace:
        w.writerow([row[0], repr(row[1]), repr(row[2]), row[3], repr(row[4]), row[5]])
    return buf.getvalue()


# -- interpolation ---------------------------------------------------------------------


@dataclass
class InterpPoint:
    ratio: float
    tokens: tuple[str, ...]
    expr: Expr | None

    @property
    def valid(self) -> bool:
        return self.expr is not None

    def to_dict(self) -> dict:
        return {"ratio": self.ratio, "expr_text": to_text(self.expr) if self.expr is not None else "INVALID"}


def decode_point(model: ModelParams, z: np.ndarray, n_vars: int | None = None) -> tuple[tuple[str, ...], Expr | None]:
    """Greedy decode of a single latent point (batch of one, so bits never depend on neighbours)."""
    toks = tuple(greedy_decode(model, np.asarray(z)[None]).tokens[0])
    return toks, parse_decoded(toks, n_vars if n_vars is not None else model.config.max_vars)


def interpolate(model: ModelParams, data1, data2, ratios: Sequence[float] = DEFAULT_RATIOS) -> list[InterpPoint]:
    """Decode points on the segment between the prior means of two datasets."""
    z1 = localize(model, *data1).mean
    z2 = localize(model, *data2).mean
    out = []
    for r in ratios:
        z = z1 if r == 0 else (z2 if r == 1 else (1.0 - r) * z1 + r * z2)
        toks, e = decode_point(model, z)
        out.append(InterpPoint(float(r), toks, e))
    return out


def validity_rate(points: Sequence[InterpPoint]) -> float:
    return sum(p.valid for p in points) / len(points) if points else 0.0


# -- reconstruction ------------------------------------------------------------------------


@dataclass
class ReconResult:
    branch: str
    mean: float
    std: float
    distances: np.ndarray


def reconstruction_eval(model: ModelParams, entries, branch: str = "posterior", batch: int = 128) -> ReconResult:
    """Normalized edit distance between each equation and the decode of its distribution mean."""
    if branch not in ("posterior", "prior"):
        raise ValueError("branch must be 'posterior' or 'prior'")
    if not entries:
        raise ValueError("empty corpus")
    cfg, vocab = model.config, model.vocab
    dists = []
    for i in range(0, len(entries), batch):
        chunk = entries[i : i + batch]
        grids = np.stack([encode_data(model, e.X, e.y) for e in chunk])
        if branch == "posterior":
            F = np.stack([encode_equation(e.expr, cfg.pad_len, vocab) for e in chunk])
            g = encode_posterior(model, grids, F)
        else:
            g = encode_prior(model, grids)
        out = greedy_decode(model, g.mean)
        for e, toks in zip(chunk, out.tokens):
            target = strip_special(to_prefix(e.expr))
            dists.append(edit_distance(strip_special(toks), target) / len(target))
    d = np.asarray(dists)
    return ReconResult(branch, float(d.mean()), float(d.std()), d)


# -- noise benchmark -------------------------------------------------------------------------


@dataclass
class BenchRow:
    method: str
    dataset: str
    noise: float
    r2: float
    time_s: float | None
    complexity: int
    seed: int


def noise_bench(
    model: ModelParams,
    targets: Sequence[Expr],
    levels: Sequence[float] = NOISE_LEVELS,
    cfg: CmaConfig | None = None,
    gen_cfg: GenConfig | None = None,
    n_points: int = 64,
    seed: int = 0,
    record_time: bool = True,
    **search_kw,
) -> tuple[list[tuple], list[BenchRow]]:
    """Search every target at every noise level.

    Inputs are shared across levels for a target; only the noise draw
    differs. Returns the per-level summary ``(level, mean_r2, mean_time,
    mean_complexity)`` and the per-run rows.
    """
    cfg = cfg or CmaConfig(seed=seed)
    gen_cfg = gen_cfg or GenConfig(max_vars=model.config.max_vars)
    runs: list[BenchRow] = []
    for ti, target in enumerate(targets):
        n_vars = max(variables(target)) + 1 if variables(target) else 1
        X, y = sample_dataset(target, gen_cfg, substream(seed, "bench-x", ti), n_vars=n_vars, m=n_points)
        for li, level in enumerate(levels):
            noisy = add_noise(y, level, substream(seed, "bench-noise", ti * 1000 + li))
            run_cfg = CmaConfig(**{**cfg.__dict__, "seed": seed})
            try:
                res = search(model, X, noisy, run_cfg, record_time=record_time, **search_kw)
                score, cx, t = res.r2, res.complexity, res.time_s
            except (DegenerateError, ValueError):
                score, cx, t = -math.inf, 0, None
            runs.append(BenchRow(METHOD_NAME, prefix_text(target), float(level), score, t, cx, seed))
    summary = []
    for level in levels:
        rows = [r for r in runs if r.noise == float(level)]
        times = [r.time_s for r in rows if r.time_s is not None]
        summary.append((
            float(level),
            float(np.mean([r.r2 for r in rows])) if rows else math.nan,
            float(np.mean(times)) if times else None,
            float(np.mean([r.complexity for r in rows])) if rows else math.nan,
        ))
    return summary, runs


def format_results(rows: Sequence[BenchRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for r in rows:
        w.writerow([r.method, r.dataset, repr(r.noise), repr(r.r2), "" if r.time_s is None else repr(r.time_s),
                    r.complexity, r.seed])
    return buf.getvalue()


# -- Pareto ranking --------------------------------------------------------------------------


@dataclass
class ParetoReport:
    ranks: dict[str, tuple[float, ...]]
    fronts: dict[str, int]

    def front(self, k: int) -> list[str]:
        return [m for m, f in self.fronts.items() if f == k]


def dominates(a: Sequence[float], b: Sequence[float]) -> bool:
    """``a`` is no worse everywhere and strictly better somewhere (lower is better)."""
    return all(x <= y for x, y in zip(a, b)) and any(x < y for x, y in zip(a, b))


def pareto_rank(rows: Sequence[Sequence]) -> ParetoReport:
    """Iterative non-dominated sorting of ``(method, rank1, rank2, ...)`` rows."""
    ranks = {str(r[0]): tuple(float(v) for v in r[1:]) for r in rows}
    if any(not math.isfinite(v) for vals in ranks.values() for v in vals):
        raise ValueError("ranks must be finite")
    remaining = list(ranks)
    fronts: dict[str, int] = {}
    level = 1
    while remaining:
        front = [m for m in remaining if not any(dominates(ranks[o], ranks[m]) for o in remaining if o != m)]
        for m in front:
            fronts[m] = level
        remaining = [m for m in remaining if m not in fronts]
        level += 1
    return ParetoReport(ranks, fronts)


def metric_ranks(values: dict[str, Sequence[float]], higher_better: Sequence[bool]) -> list[tuple]:
    """Convert raw per-method metrics to average ranks (1 = best) per metric."""
    from scipy.stats import rankdata

    methods = list(values)
    cols = []
    for j, hb in enumerate(higher_better):
        v = np.array([values[m][j] for m in methods], dtype=float)
        cols.append(rankdata(-v if hb else v, method="average"))
    return [(m, *[float(c[i]) for c in cols]) for i, m in enumerate(methods)]


# -- latent export ---------------------------------------------------------------------------


def export_latents(model: ModelParams, entries, batch: int = 256) -> str:
    """CSV of prior means, one row per corpus entry, for external visualization."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index", "family", "expr"] + [f"mu{j}" for j in range(model.d)])
    for i in range(0, len(entries), batch):
        chunk = entries[i : i + batch]
        grids = np.stack([encode_data(model, e.X, e.y) for e in chunk])
        mu = encode_prior(model, grids).mean
        for j, (e, row) in enumerate(zip(chunk, mu)):
            w.writerow([i + j, e.family, prefix_text(e.expr)] + [repr(float(v)) for v in row])
    return buf.getvalue()
