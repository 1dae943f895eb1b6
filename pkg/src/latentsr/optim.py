"""Fine search: diagonal CMA-ES with a top-k active set, and BFGS constant fitting."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .errors import AllRestartsFailed, DegenerateError
from .expr import Expr, evaluate_masked, n_placeholders, with_constants

VAR_FLOOR = 1e-12


# -- metrics ---------------------------------------------------------------------


def r2(y, yhat) -> float:
    """Coefficient of determination.

    A constant target gives 1 for a perfect prediction and -inf otherwise.
    """
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape or y.size < 2:
        raise ValueError("r2 needs two equal-length sequences of at least 2 values")
    ss_res = float(np.sum((y - yhat) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if not math.isfinite(ss_res):
        return -math.inf
    if ss_tot == 0.0:
        return 1.0 if ss_res == 0.0 else -math.inf
    return 1.0 - ss_res / ss_tot


def fitness(r2_value: float, complexity: int, omega: float) -> float:
    if omega < 0:
        raise ValueError("omega must be >= 0")
    return r2_value - omega * complexity


# -- CMA-ES ------------------------------------------------------------------------


@dataclass
class CmaConfig:
    s: int = 50  # population size
    p: int | None = None  # parents; defaults to s // 2
    k: int | None = None  # active dimensions; defaults to d // 2
    t: float = 1.1  # initial step size, scales the prior std
    max_generations: int = 100
    omega: float = 0.005
    seed: int = 0
    max_widen: int = 3

    def __post_init__(self):
        if self.s < 1 or self.t <= 0 or self.max_generations < 0 or self.omega < 0:
            raise ValueError("invalid CMA-ES configuration")
        if self.p is not None and not 1 <= self.p <= self.s:
            raise ValueError("need 1 <= p <= s")

    @property
    def parents(self) -> int:
        return self.p if self.p is not None else max(1, self.s // 2)

    def active_count(self, d: int) -> int:
        k = self.k if self.k is not None else max(1, d // 2)
        if not 1 <= k <= d:
            raise ValueError(f"need 1 <= k <= d, got k={k}, d={d}")
        return k


@dataclass
class CmaState:
    mean: np.ndarray
    var: np.ndarray  # diagonal covariance; sampling std is sigma * sqrt(var)
    sigma: float
    k: int
    generation: int = 0
    path: np.ndarray = field(default=None)  # conjugate evolution path (all d dims)

    def __post_init__(self):
        if self.path is None:
            self.path = np.zeros_like(self.mean)

    @property
    def d(self) -> int:
        return self.mean.shape[0]

    @property
    def active(self) -> np.ndarray:
        return top_k_indices(self.var, self.k)

    @property
    def effective_var(self) -> np.ndarray:
        return self.sigma**2 * self.var


def top_k_indices(var: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest variances, ties going to the lower index."""
    order = np.argsort(-np.asarray(var), kind="stable")
    return np.sort(order[:k])


def cma_init(prior, cfg: CmaConfig) -> CmaState:
    mean = np.array(prior.mean, dtype=np.float64)
    var = cfg.t**2 * np.array(prior.var, dtype=np.float64)
    if not (np.all(var > 0) and np.all(np.isfinite(var)) and np.all(np.isfinite(mean))):
        raise ValueError("prior must have finite mean and positive finite variance")
    return CmaState(mean, var, 1.0, cfg.active_count(mean.shape[0]))


def cma_sample(state: CmaState, s: int, rng: np.random.Generator) -> np.ndarray:
    """``s`` candidates; only active coordinates are perturbed."""
    if s < 1:
        raise ValueError("s must be >= 1")
    eps = np.zeros((s, state.d))
    act = state.active
    eps[:, act] = rng.standard_normal((s, act.size))
    return state.mean + state.sigma * np.sqrt(state.var) * eps


def recombination_weights(p: int) -> np.ndarray:
    w = math.log(p + 0.5) - np.log(np.arange(1, p + 1))
    return w / w.sum()


def _expected_norm(k: int) -> float:
    return math.sqrt(k) * (1.0 - 1.0 / (4.0 * k) + 1.0 / (21.0 * k * k))


def cma_update(state: CmaState, ranked: Sequence[tuple[np.ndarray, float]], cfg: CmaConfig) -> CmaState:
    """One generation of the diagonal update from candidates sorted best-first.

    Only finite-fitness candidates are recombined; when fewer than ``p`` are
    finite the parent count shrinks accordingly.
    """
    finite = [np.asarray(z, dtype=np.float64) for z, f in ranked if math.isfinite(f)]
    if not finite:
        raise DegenerateError("every candidate in the generation was invalid")
    p = min(cfg.parents, len(finite))
    Z = np.stack(finite[:p])
    w = recombination_weights(p)
    mu_eff = 1.0 / float(np.sum(w * w))
    d, k = state.d, state.k
    act = state.active

    old = state.mean
    mean = w @ Z
    Y = (Z - old) / state.sigma  # steps in units of the global step size

    # cumulative step-size adaptation over the active subspace
    c_sigma = (mu_eff + 2.0) / (k + mu_eff + 5.0)
    damps = 1.0 + 2.0 * max(0.0, math.sqrt((mu_eff - 1.0) / (k + 1.0)) - 1.0) + c_sigma
    path = state.path.copy()
    y_w = (mean - old) / state.sigma
    path[act] = (1.0 - c_sigma) * path[act] + math.sqrt(c_sigma * (2.0 - c_sigma) * mu_eff) * y_w[act] / np.sqrt(
        state.var[act]
    )
    sigma = state.sigma * math.exp((c_sigma / damps) * (np.linalg.norm(path[act]) / _expected_norm(k) - 1.0))

    c_var = 2.0 / (d + 6.0)
    var = state.var.copy()
    var[act] = (1.0 - c_var) * var[act] + c_var * (w @ (Y[:, act] ** 2))
    var[act] = np.maximum(var[act], VAR_FLOOR)
    return CmaState(mean, var, float(sigma), k, state.generation + 1, path)


def widen(state: CmaState, factor: float = 2.0) -> CmaState:
    return replace(state, sigma=state.sigma * factor)


def rank_candidates(zs: np.ndarray, fits: Sequence[float], complexities: Sequence[int]) -> list[int]:
    """Order best-first: higher fitness, then lower complexity, then lower index."""
    return sorted(range(len(fits)), key=lambda i: (-fits[i], complexities[i], i))


def cma_maximize(f: Callable[[np.ndarray], float], state: CmaState, cfg: CmaConfig, generations: int):
    """Maximize a black-box ``f``; returns the final state and best-so-far per generation."""
    rng = np.random.default_rng(cfg.seed)
    best = -math.inf
    history = []
    for _ in range(generations):
        zs = cma_sample(state, cfg.s, rng)
        fits = [f(z) for z in zs]
        order = rank_candidates(zs, fits, [0] * len(fits))
        best = max(best, fits[order[0]])
        history.append(best)
        state = cma_update(state, [(zs[i], fits[i]) for i in order], cfg)
    return state, history


# -- BFGS --------------------------------------------------------------------------


@dataclass
class BfgsResult:
    x: np.ndarray
    fun: float
    iterations: int
    converged: bool


def _fd_grad(f, x: np.ndarray, fx: float) -> np.ndarray:
    g = np.empty_like(x)
    for i in range(x.size):
        h = 1e-6 * max(1.0, abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        fp, fm = f(xp), f(xm)
        if math.isfinite(fp) and math.isfinite(fm):
            g[i] = (fp - fm) / (2 * h)
        elif math.isfinite(fp):
            g[i] = (fp - fx) / h
        elif math.isfinite(fm):
            g[i] = (fx - fm) / h
        else:
            g[i] = 0.0
    return g


def bfgs_minimize(
    f: Callable[[np.ndarray], float],
    x0,
    max_iter: int = 200,
    gtol: float = 1e-10,
    ftol: float = 1e-15,
    c1: float = 1e-4,
    shrink: float = 0.5,
) -> BfgsResult:
    """Quasi-Newton minimization with finite-difference gradients and Armijo backtracking."""
    x = np.array(x0, dtype=np.float64)
    n = x.size
    fx = f(x)
    if not math.isfinite(fx):
        return BfgsResult(x, math.inf, 0, False)
    if n == 0:
        return BfgsResult(x, fx, 0, True)
    with np.errstate(over="ignore", invalid="ignore"):
        return _bfgs_loop(f, x, fx, max_iter, gtol, ftol, c1, shrink)


def _bfgs_loop(f, x, fx, max_iter, gtol, ftol, c1, shrink) -> BfgsResult:
    n = x.size
    H = np.eye(n)
    g = _fd_grad(f, x, fx)
    for it in range(1, max_iter + 1):
        if not np.all(np.isfinite(g)):
            return BfgsResult(x, fx, it - 1, False)
        if np.max(np.abs(g)) < gtol:
            return BfgsResult(x, fx, it - 1, True)
        d = -H @ g
        slope = float(g @ d)
        if slope >= 0:
            H = np.eye(n)
            d = -g
            slope = float(-(g @ g))
        alpha = 1.0
        for _ in range(60):
            x_new = x + alpha * d
            f_new = f(x_new)
            if math.isfinite(f_new) and f_new <= fx + c1 * alpha * slope:
                break
            alpha *= shrink
        else:
            return BfgsResult(x, fx, it, False)
        g_new = _fd_grad(f, x_new, f_new)
        s = x_new - x
        yv = g_new - g
        improvement = fx - f_new
        x, fx, g = x_new, f_new, g_new
        sy = float(s @ yv)
        if sy > 1e-300:
            if it == 1:
                H = np.eye(n) * (sy / float(yv @ yv))
            rho = 1.0 / sy
            I = np.eye(n)
            H = (I - rho * np.outer(s, yv)) @ H @ (I - rho * np.outer(yv, s)) + rho * np.outer(s, s)
        if improvement <= ftol * max(1.0, abs(fx)):
            return BfgsResult(x, fx, it, True)
    return BfgsResult(x, fx, max_iter, False)


def mse_objective(skeleton: Expr, X: np.ndarray, y: np.ndarray) -> Callable[[np.ndarray], float]:
    def f(c):
        yhat, ok = evaluate_masked(skeleton, X, c)
        if not ok.all():
            return math.inf
        with np.errstate(over="ignore", invalid="ignore"):
            r = yhat - y
            v = float(np.mean(r * r))
        return v if math.isfinite(v) else math.inf

    return f


@dataclass
class ConstantFit:
    expr: Expr
    mse: float
    constants: np.ndarray
    restarts_used: int


def bfgs_fit_constants(
    skeleton: Expr,
    X,
    y,
    rng: np.random.Generator | None = None,
    restarts: int = 3,
    extra_starts: Sequence[Sequence[float]] = (),
    tol: float = 1e-20,
) -> ConstantFit:
    """Fit the placeholder constants of ``skeleton`` by least squares.

    Starts are any ``extra_starts`` first, then all-ones, then ``restarts``
    standard-normal draws. Stops early once the MSE falls below ``tol``
    times the mean square of ``y`` (floored at 1). Raises AllRestartsFailed
    when no start point is inside the expression's domain.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y.size == 0:
        raise ValueError("empty data")
    n = n_placeholders(skeleton)
    f = mse_objective(skeleton, X, y)
    if n == 0:
        v = f(np.zeros(0))
        if not math.isfinite(v):
            raise AllRestartsFailed("expression is undefined on the data")
        return ConstantFit(skeleton, v, np.zeros(0), 0)
    rng = rng or np.random.default_rng(0)
    starts = [np.asarray(s, dtype=np.float64) for s in extra_starts if len(s) == n]
    starts.append(np.ones(n))
    starts += [rng.standard_normal(n) for _ in range(restarts)]
    stop_at = tol * max(1.0, float(np.mean(y * y)))
    best: BfgsResult | None = None
    used = 0
    for x0 in starts:
        used += 1
        res = bfgs_minimize(f, x0)
        if math.isfinite(res.fun) and (best is None or res.fun < best.fun):
            best = res
        if best is not None and best.fun <= stop_at:
            break
    if best is None:
        raise AllRestartsFailed(f"all {used} starts are outside the domain")
    return ConstantFit(with_constants(skeleton, best.x.tolist()), best.fun, best.x, used)
