"""Dual-branch conditional VAE over numeric samples and prefix equations.

The posterior branch encodes (X, F) and the prior branch encodes X alone;
both share one Transformer encoder and emit diagonal Gaussians. Latent
samples are mean-pooled, mapped to decoder memory tokens, and a causal
Transformer decoder reconstructs the prefix token sequence.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from statistics import NormalDist
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .encoding import (
    EXPONENT_MAX,
    EXPONENT_MIN,
    MANTISSA_MAX,
    Vocabulary,
    default_vocabulary,
    encode_equation,
    encode_samples,
    pad_sample_grid,
)
from .errors import NonFiniteLoss, ShapeError
from .seeding import substream

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0
NEG_INF = -1e9


@dataclass
class ModelConfig:
    pad_len: int
    max_vars: int = 2
    d: int = 32
    d_n: int = 8
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 64
    n_memory: int = 4
    dtype: str = "float32"

    def __post_init__(self):
        if self.d % self.n_heads:
            raise ValueError("d must be divisible by n_heads")
        if min(self.pad_len, self.max_vars, self.d, self.d_n, self.n_layers, self.d_ff, self.n_memory) < 1:
            raise ValueError("model sizes must be positive")

    @property
    def row_width(self) -> int:
        return 3 * (self.max_vars + 1)


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 10
    steps_per_epoch: int = 100
    base_lr: float = 0.03
    warmup: int = 200
    kl_anneal_frac: float = 0.5
    n_latent: int = 4
    clip_norm: float = 1.0
    adam_betas: tuple[float, float] = (0.9, 0.98)
    adam_eps: float = 1e-9
    seed: int = 0

    def __post_init__(self):
        self.adam_betas = tuple(self.adam_betas)
        if min(self.batch_size, self.epochs, self.steps_per_epoch, self.warmup, self.n_latent) < 1:
            raise ValueError("training sizes must be positive")
        if self.base_lr <= 0 or not 0 < self.kl_anneal_frac <= 1:
            raise ValueError("invalid learning rate or annealing fraction")
        if self.warmup > self.total_steps:
            raise ValueError("warmup longer than training")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch


@dataclass
class DiagGaussian:
    """Diagonal Gaussian; arrays may carry leading batch dimensions."""

    mean: np.ndarray
    var: np.ndarray

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.var)

    @property
    def logvar(self) -> np.ndarray:
        return np.log(self.var)

    def __getitem__(self, i) -> "DiagGaussian":
        return DiagGaussian(self.mean[i], self.var[i])


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    vocab: Vocabulary = field(default_factory=default_vocabulary)

    @property
    def d(self) -> int:
        return self.config.d

    def n_parameters(self) -> int:
        return int(sum(a.size for a in self.tensors.values()))


# -- initialization ----------------------------------------------------------


def _numeric_embedding_init(vocab: Vocabulary, d_n: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth sinusoidal codes for mantissa/exponent tokens plus small noise.

    Neighbouring mantissas start with similar embeddings, which a random
    table would only learn from far more data.
    """
    table = 0.02 * rng.standard_normal((len(vocab), d_n))
    half = max(1, d_n // 2)
    freqs = np.pi * 2.0 ** np.arange(half)
    mant = np.arange(MANTISSA_MAX + 1) / (MANTISSA_MAX + 1)
    ids = np.array(vocab.ids([str(i) for i in range(MANTISSA_MAX + 1)]))
    codes = np.concatenate([np.sin(np.outer(mant, freqs)), np.cos(np.outer(mant, freqs))], axis=1)[:, :d_n]
    table[ids, : codes.shape[1]] += codes
    exps = np.arange(EXPONENT_MIN, EXPONENT_MAX + 1)
    ids = np.array(vocab.ids([f"E{e}" for e in exps]))
    scaled = (exps - EXPONENT_MIN) / (EXPONENT_MAX - EXPONENT_MIN)
    codes = np.concatenate([np.sin(np.outer(scaled, freqs * 8)), np.cos(np.outer(scaled, freqs * 8))], axis=1)[:, :d_n]
    table[ids, : codes.shape[1]] += codes
    table[vocab.index["+"]] += 1.0
    table[vocab.index["-"]] -= 1.0
    table[vocab.pad_id] = 0.0
    return table


def init_params(cfg: ModelConfig, seed: int = 0, vocab: Vocabulary | None = None) -> ModelParams:
    vocab = vocab or default_vocabulary()
    rng = np.random.default_rng(seed)
    d, V = cfg.d, len(vocab)
    t: dict[str, np.ndarray] = {}

    def dense(name, fan_in, fan_out, scale=1.0):
        t[name + ".w"] = rng.standard_normal((fan_in, fan_out)) * (scale / math.sqrt(fan_in))
        t[name + ".b"] = np.zeros(fan_out)

    def norm(name, n=d):
        t[name + ".g"] = np.ones(n)
        t[name + ".b"] = np.zeros(n)

    def attention(name):
        for part in ("q", "k", "v", "o"):
            dense(f"{name}.{part}", d, d)

    t["num_emb"] = _numeric_embedding_init(vocab, cfg.d_n, rng)
    dense("num_proj", cfg.row_width * cfg.d_n, d)
    t["eq_emb"] = rng.standard_normal((V, d)) * 0.5
    t["seg_x"] = rng.standard_normal(d) * 0.1
    t["seg_f"] = rng.standard_normal(d) * 0.1
    t["mask_emb"] = rng.standard_normal(d) * 0.5
    for i in range(cfg.n_layers):
        p = f"enc{i}"
        norm(p + ".ln1")
        attention(p + ".att")
        norm(p + ".ln2")
        dense(p + ".ff1", d, cfg.d_ff)
        dense(p + ".ff2", cfg.d_ff, d)
    norm("enc.ln")
    for head in ("post", "prior"):
        dense(head + ".h1", 2 * d, d)
        dense(head + ".h2", d, 2 * d, scale=0.1)
    dense("fuse", d, cfg.n_memory * d)
    for i in range(cfg.n_layers):
        p = f"dec{i}"
        norm(p + ".ln1")
        attention(p + ".self")
        norm(p + ".ln2")
        attention(p + ".cross")
        norm(p + ".ln3")
        dense(p + ".ff1", d, cfg.d_ff)
        dense(p + ".ff2", cfg.d_ff, d)
    norm("dec.ln")
    dense("out", d, V)
    dtype = np.dtype(cfg.dtype)
    return ModelParams(cfg, {k: v.astype(dtype) for k, v in t.items()}, vocab)


def positional_encoding(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d // 2 + d % 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / d)
    pe = np.zeros((length, d))
    pe[:, 0::2] = np.sin(angle)[:, : (d + 1) // 2]
    pe[:, 1::2] = np.cos(angle)[:, : d // 2]
    return pe


# -- building blocks ---------------------------------------------------------


def _linear(P, name, x):
    return x @ P[name + ".w"] + P[name + ".b"]


def _ln(P, name, x):
    return ad.layer_norm(x, P[name + ".g"], P[name + ".b"])


def _mha(P, name, q_in, kv_in, n_heads, mask):
    B, Tq, d = q_in.shape
    Tk = kv_in.shape[1]
    dh = d // n_heads
    q = _linear(P, name + ".q", q_in).reshape(B, Tq, n_heads, dh).transpose(0, 2, 1, 3)
    k = _linear(P, name + ".k", kv_in).reshape(B, Tk, n_heads, dh).transpose(0, 2, 3, 1)
    v = _linear(P, name + ".v", kv_in).reshape(B, Tk, n_heads, dh).transpose(0, 2, 1, 3)
    scores = (q @ k) * (1.0 / math.sqrt(dh))
    att = ad.softmax(scores, mask)
    out = (att @ v).transpose(0, 2, 1, 3).reshape(B, Tq, d)
    return _linear(P, name + ".o", out)


def _ff(P, name, x):
    return _linear(P, name + ".ff2", ad.gelu(_linear(P, name + ".ff1", x)))


def _encoder(P, cfg: ModelConfig, h, key_mask):
    for i in range(cfg.n_layers):
        p = f"enc{i}"
        h = h + _mha(P, p + ".att", _ln(P, p + ".ln1", h), _ln(P, p + ".ln1", h), cfg.n_heads, key_mask)
        h = h + _ff(P, p, _ln(P, p + ".ln2", h))
    return _ln(P, "enc.ln", h)


def _embed_numeric(P, cfg: ModelConfig, X_ids: np.ndarray):
    B, m, W = X_ids.shape
    e = ad.embedding(P["num_emb"], X_ids).reshape(B, m, W * cfg.d_n)
    # no positional encoding: row order carries no meaning
    return _linear(P, "num_proj", e) + P["seg_x"]


def _head(P, name, pooled, d):
    out = _linear(P, name + ".h2", ad.gelu(_linear(P, name + ".h1", pooled)))
    mu = out[:, :d]
    logvar = ad.clip(out[:, d:], LOGVAR_MIN, LOGVAR_MAX)
    return mu, logvar


def _posterior_tensors(P, cfg: ModelConfig, X_ids, F_ids, pad_id):
    B, m, _ = X_ids.shape
    L = F_ids.shape[1]
    xe = _embed_numeric(P, cfg, X_ids)
    pe = positional_encoding(L, cfg.d).astype(xe.dtype)
    fe = ad.embedding(P["eq_emb"], F_ids) + pe + P["seg_f"]
    h = ad.concat([xe, fe], axis=1)
    valid_f = (F_ids != pad_id).astype(xe.dtype)
    key_mask = np.concatenate([np.zeros((B, m), dtype=xe.dtype), (1.0 - valid_f) * NEG_INF], axis=1)
    h = _encoder(P, cfg, h, key_mask[:, None, None, :])
    pooled_x = h[:, :m].mean(axis=1)
    pooled_f = (h[:, m:] * valid_f[..., None]).sum(axis=1) * (1.0 / valid_f.sum(axis=1, keepdims=True))
    return _head(P, "post", ad.concat([pooled_x, pooled_f], axis=1), cfg.d)


def _prior_tensors(P, cfg: ModelConfig, X_ids):
    B, m, _ = X_ids.shape
    xe = _embed_numeric(P, cfg, X_ids)
    mask_tok = (P["mask_emb"] + P["seg_f"]).reshape(1, 1, cfg.d) + np.zeros((B, 1, cfg.d), dtype=xe.dtype)
    h = _encoder(P, cfg, ad.concat([xe, mask_tok], axis=1), None)
    pooled = ad.concat([h[:, :m].mean(axis=1), h[:, m]], axis=1)
    return _head(P, "prior", pooled, cfg.d)


def _fuse_tensors(P, cfg: ModelConfig, latents):
    B = latents.shape[0]
    pooled = latents.mean(axis=1)
    return _linear(P, "fuse", pooled).reshape(B, cfg.n_memory, cfg.d)


def _decoder_logits(P, cfg: ModelConfig, memory, in_ids):
    B, T = in_ids.shape
    dt = memory.dtype
    h = ad.embedding(P["eq_emb"], in_ids) + positional_encoding(T, cfg.d).astype(dt)
    causal = np.triu(np.full((T, T), NEG_INF, dtype=dt), k=1)[None, None]
    for i in range(cfg.n_layers):
        p = f"dec{i}"
        x = _ln(P, p + ".ln1", h)
        h = h + _mha(P, p + ".self", x, x, cfg.n_heads, causal)
        h = h + _mha(P, p + ".cross", _ln(P, p + ".ln2", h), memory, cfg.n_heads, None)
        h = h + _ff(P, p, _ln(P, p + ".ln3", h))
    return _linear(P, "out", _ln(P, "dec.ln", h))


def _const_params(params: ModelParams) -> dict[str, Tensor]:
    return {k: Tensor(v) for k, v in params.tensors.items()}


# -- public inference API ------------------------------------------------------


def prepare_grid(params: ModelParams, grid) -> np.ndarray:
    """Validate and pad a sample grid to ``(B, m, 3 * (max_vars + 1))``."""
    grid = np.asarray(grid)
    if grid.ndim == 2:
        grid = grid[None]
    if grid.ndim != 3 or grid.shape[-1] % 3 or grid.shape[1] < 1:
        raise ShapeError(f"sample grid has shape {grid.shape}")
    n_vars = grid.shape[-1] // 3 - 1
    if n_vars > params.config.max_vars:
        raise ShapeError(f"{n_vars} variables, model supports {params.config.max_vars}")
    return pad_sample_grid(grid, params.config.max_vars, params.vocab)


def prepare_equation(params: ModelParams, F) -> np.ndarray:
    F = np.asarray(F)
    if F.ndim == 1:
        F = F[None]
    if F.shape[-1] != params.config.pad_len:
        raise ShapeError(f"equation length {F.shape[-1]}, model pad length is {params.config.pad_len}")
    return F


def encode_posterior(params: ModelParams, X, F) -> DiagGaussian:
    """q(z | X, F); X is a sample-id grid, F a padded id sequence (batched or not)."""
    single = np.asarray(F).ndim == 1
    Xb, Fb = prepare_grid(params, X), prepare_equation(params, F)
    if Xb.shape[0] != Fb.shape[0]:
        raise ShapeError("batch sizes of X and F differ")
    with no_grad():
        mu, lv = _posterior_tensors(_const_params(params), params.config, Xb, Fb, params.vocab.pad_id)
    g = DiagGaussian(mu.data.astype(np.float64), np.exp(lv.data.astype(np.float64)))
    return g[0] if single else g


def encode_prior(params: ModelParams, X) -> DiagGaussian:
    """p(z | X) from numeric samples only."""
    single = np.asarray(X).ndim == 2
    Xb = prepare_grid(params, X)
    with no_grad():
        mu, lv = _prior_tensors(_const_params(params), params.config, Xb)
    g = DiagGaussian(mu.data.astype(np.float64), np.exp(lv.data.astype(np.float64)))
    return g[0] if single else g


def encode_data(params: ModelParams, X, y) -> np.ndarray:
    """Raw ``(X, y)`` arrays to a padded sample-id grid."""
    return prepare_grid(params, encode_samples(X, y, params.vocab))[0]


def reparameterize(g: DiagGaussian, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` draws ``mu + sigma * eps``; shape ``(..., n, d)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    mean = np.asarray(g.mean)
    eps = rng.standard_normal(mean.shape[:-1] + (n, mean.shape[-1]))
    return mean[..., None, :] + np.sqrt(g.var)[..., None, :] * eps


def fuse(params: ModelParams, latents) -> np.ndarray:
    """Decoder memory ``(B, n_memory, d)`` from latents ``(B, n, d)`` or ``(n, d)``."""
    z = np.asarray(latents, dtype=params.config.dtype)
    single = z.ndim == 2
    if single:
        z = z[None]
    with no_grad():
        mem = _fuse_tensors(_const_params(params), params.config, Tensor(z)).data
    return mem[0] if single else mem


@dataclass
class Decoded:
    ids: np.ndarray  # (B, pad_len): BOS, greedy tokens, PAD after EOS
    logits: np.ndarray  # (B, pad_len, V); position t predicts token t + 1
    tokens: list[list[str]]  # readout: BOS ... up to and including the first EOS


def greedy_decode(params: ModelParams, z, P: dict | None = None) -> Decoded:
    """Argmax decoding from latent points ``z`` of shape ``(B, d)`` or ``(d,)``."""
    cfg, vocab = params.config, params.vocab
    z = np.asarray(z, dtype=cfg.dtype)
    if z.ndim == 1:
        z = z[None]
    if z.shape[-1] != cfg.d:
        raise ShapeError(f"latent dimension {z.shape[-1]}, model has {cfg.d}")
    P = P or _const_params(params)
    B, L = z.shape[0], cfg.pad_len
    ids = np.full((B, L), vocab.pad_id, dtype=np.int64)
    ids[:, 0] = vocab.bos_id
    done = np.zeros(B, dtype=bool)
    with no_grad():
        memory = _fuse_tensors(P, cfg, Tensor(z[:, None, :]))
        for t in range(1, L):
            active = np.flatnonzero(~done)
            if active.size == 0:
                break
            logits = _decoder_logits(P, cfg, Tensor(memory.data[active]), ids[active, :t]).data
            nxt = logits[:, -1].argmax(axis=-1)
            ids[active, t] = nxt
            done[active[nxt == vocab.eos_id]] = True
        full = _decoder_logits(P, cfg, memory, ids).data
    tokens = []
    for row in ids:
        seq = vocab.decode(row)
        if vocab.tokens[vocab.eos_id] in seq:
            seq = seq[: seq.index(vocab.tokens[vocab.eos_id]) + 1]
        else:
            seq = [s for s in seq if s != vocab.tokens[vocab.pad_id]]
        tokens.append(seq)
    return Decoded(ids, full, tokens)


def decode(params: ModelParams, fused, X=None) -> Decoded:
    """Greedy decode from a single fused latent (or a batch of them).

    The decoder is conditioned on the latent only; ``X``, when given, is
    validated against the model configuration but not consumed.
    """
    if X is not None:
        prepare_grid(params, X)
    return greedy_decode(params, fused)


# -- divergences and regions ---------------------------------------------------


def kl_divergence(q: DiagGaussian, p: DiagGaussian) -> np.ndarray:
    """Closed-form KL(q || p) between diagonal Gaussians, summed over the last axis."""
    qm, qv = np.asarray(q.mean, float), np.asarray(q.var, float)
    pm, pv = np.asarray(p.mean, float), np.asarray(p.var, float)
    if qm.shape != pm.shape:
        raise ShapeError("dimension mismatch")
    ratio = qv / pv
    return 0.5 * np.sum((qm - pm) ** 2 / pv + ratio - np.log(ratio) - 1.0, axis=-1)


def _kl_tensor(mu1, lv1, mu2, lv2):
    diff = mu1 - mu2
    inv_v2 = ad.exp(-lv2)
    ratio = ad.exp(lv1 - lv2)
    return ((diff * diff * inv_v2 + ratio - (lv1 - lv2)) - 1.0).sum(axis=-1) * 0.5


def chi2_quantile(d: int, alpha: float) -> float:
    """Wilson-Hilferty approximation of the chi-squared alpha-quantile."""
    z = NormalDist().inv_cdf(alpha)
    c = 2.0 / (9.0 * d)
    return d * (1.0 - c + z * math.sqrt(c)) ** 3


def region_contains(g: DiagGaussian, z, alpha: float) -> bool | np.ndarray:
    """Whether ``z`` lies in the alpha high-confidence ellipsoid of ``g``."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    z = np.asarray(z, dtype=np.float64)
    stat = np.sum((z - g.mean) ** 2 / g.var, axis=-1)
    inside = stat <= chi2_quantile(np.shape(g.mean)[-1], alpha)
    return bool(inside) if np.ndim(inside) == 0 else inside


# -- loss ------------------------------------------------------------------------


@dataclass
class Batch:
    X: np.ndarray  # (B, m, row_width) sample ids
    F: np.ndarray  # (B, pad_len) equation ids

    def __len__(self):
        return self.X.shape[0]


@dataclass
class LossResult:
    total: float
    lce: float
    lkl: float
    grads: dict[str, np.ndarray]
    per_item_ce: np.ndarray
    per_item_kl: np.ndarray


def decoder_targets(F: np.ndarray, pad_id: int) -> tuple[np.ndarray, np.ndarray]:
    """Next-token targets (F shifted left, PAD appended) and their loss weights."""
    targets = np.concatenate([F[:, 1:], np.full((F.shape[0], 1), pad_id, dtype=F.dtype)], axis=1)
    return targets, (targets != pad_id)


def loss(params: ModelParams, batch: Batch, lam: float, eps: np.ndarray, step: int = 0) -> LossResult:
    """Mean over the batch of token cross-entropy plus ``lam`` times KL(q || p).

    ``eps`` holds the standard-normal draws ``(B, n, d)`` used by the
    reparameterization, so the loss is a deterministic function of params.
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if len(batch) == 0:
        raise ValueError("empty batch")
    cfg, vocab = params.config, params.vocab
    dt = np.dtype(cfg.dtype)
    P = {k: Tensor(v, requires_grad=True) for k, v in params.tensors.items()}
    X = prepare_grid(params, batch.X)
    F = prepare_equation(params, batch.F)
    mu1, lv1 = _posterior_tensors(P, cfg, X, F, vocab.pad_id)
    mu2, lv2 = _prior_tensors(P, cfg, X)
    B = X.shape[0]
    std = ad.exp(lv1 * 0.5).reshape(B, 1, cfg.d)
    z = mu1.reshape(B, 1, cfg.d) + std * np.asarray(eps, dtype=dt)
    memory = _fuse_tensors(P, cfg, z)
    logits = _decoder_logits(P, cfg, memory, F)
    targets, weights = decoder_targets(F, vocab.pad_id)
    ce = ad.cross_entropy(logits, targets, weights.astype(dt))
    kl = _kl_tensor(mu1, lv1, mu2, lv2)
    bad = ~(np.isfinite(ce.data) & np.isfinite(kl.data))
    if bad.any():
        raise NonFiniteLoss(step, int(np.flatnonzero(bad)[0]))
    total = ce.mean() + kl.mean() * float(lam)
    total.backward(np.ones((), dtype=dt))
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in P.items()}
    return LossResult(
        float(total.data),
        float(ce.data.mean()),
        float(kl.data.mean()),
        grads,
        ce.data.astype(np.float64),
        kl.data.astype(np.float64),
    )


# -- schedules -------------------------------------------------------------------


def kl_weight(step: int, total_steps: int, frac: float = 0.5) -> float:
    """Linear ramp from 0 to 1 over the first ``frac`` of training, then 1."""
    if total_steps <= 0:
        return 1.0
    return min(1.0, step / (frac * total_steps))


def lr_schedule(step: int, warmup: int, base: float) -> float:
    """Noam schedule: linear warm-up, then inverse square-root decay."""
    if step < 1 or warmup < 1:
        raise ValueError("step and warmup must be >= 1")
    return base * min(step**-0.5, step * warmup**-1.5)


# -- training ----------------------------------------------------------------------


def pad_len_for(exprs) -> int:
    from .expr import to_prefix

    return max(len(to_prefix(e)) for e in exprs)


def corpus_arrays(params_or_cfg, entries, vocab: Vocabulary | None = None):
    """Stack a corpus into sample-id grids ``(N, m, W)`` and equation ids ``(N, L)``."""
    cfg = params_or_cfg.config if isinstance(params_or_cfg, ModelParams) else params_or_cfg
    vocab = vocab or default_vocabulary()
    m = {len(e.y) for e in entries}
    if len(m) != 1:
        raise ShapeError(f"corpus entries have differing sample counts {sorted(m)}")
    X = np.stack([pad_sample_grid(encode_samples(e.X, e.y, vocab), cfg.max_vars, vocab) for e in entries])
    F = np.stack([encode_equation(e.expr, cfg.pad_len, vocab) for e in entries])
    return X, F


def batch_indices(n: int, batch_size: int, step: int, seed: int) -> np.ndarray:
    """Indices for 1-based ``step``: consecutive slices of per-pass permutations."""
    start = (step - 1) * batch_size
    out = []
    while len(out) < batch_size:
        k, off = divmod(start + len(out), n)
        perm = substream(seed, "perm", k).permutation(n)
        out.extend(perm[off : off + batch_size - len(out)].tolist())
    return np.asarray(out)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, tensors: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(a) for k, a in tensors.items()}, {k: np.zeros_like(a) for k, a in tensors.items()})


def adam_update(tensors, grads, state: AdamState, lr: float, betas, eps: float) -> None:
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for k, g in grads.items():
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        tensors[k] -= (lr / c1) * m / (np.sqrt(v / c2) + eps)


LOG_COLUMNS = ("step", "lce", "lkl", "lambda", "lr")


def train(
    entries,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    *,
    params: ModelParams | None = None,
    adam: AdamState | None = None,
    on_epoch: Callable[[ModelParams, AdamState, int], None] | None = None,
    on_step: Callable[[tuple], None] | None = None,
) -> tuple[ModelParams, AdamState, list[tuple]]:
    """Adam training with the KL-annealing and Noam schedules.

    Pass ``params``/``adam`` from a checkpoint to resume; the step counter
    continues from ``adam.step``. ``on_epoch`` runs after each epoch (used for
    checkpointing). Returns the final params, optimizer state and log rows
    ``(step, lce, lkl, lambda, lr)``.
    """
    if not entries:
        raise ValueError("empty corpus")
    params = params or init_params(model_cfg, train_cfg.seed)
    adam = adam or AdamState.zeros_like(params.tensors)
    X_all, F_all = corpus_arrays(params, entries, params.vocab)
    total = train_cfg.total_steps
    dt = np.dtype(model_cfg.dtype)
    log = []
    for step in range(adam.step + 1, total + 1):
        idx = batch_indices(len(entries), train_cfg.batch_size, step, train_cfg.seed)
        eps = substream(train_cfg.seed, "eps", step).standard_normal(
            (len(idx), train_cfg.n_latent, model_cfg.d)
        ).astype(dt)
        lam = kl_weight(step, total, train_cfg.kl_anneal_frac)
        lr = lr_schedule(step, train_cfg.warmup, train_cfg.base_lr)
        try:
            res = loss(params, Batch(X_all[idx], F_all[idx]), lam, eps, step)
        except NonFiniteLoss as exc:
            raise NonFiniteLoss(step, None if exc.batch_index is None else int(idx[exc.batch_index])) from None
        grads = res.grads
        if train_cfg.clip_norm > 0:
            norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
            if norm > train_cfg.clip_norm:
                scale = train_cfg.clip_norm / norm
                grads = {k: g * scale for k, g in grads.items()}
        adam_update(params.tensors, grads, adam, lr, train_cfg.adam_betas, train_cfg.adam_eps)
        row = (step, res.lce, res.lkl, lam, lr)
        log.append(row)
        if on_step is not None:
            on_step(row)
        if on_epoch is not None and step % train_cfg.steps_per_epoch == 0:
            on_epoch(params, adam, step // train_cfg.steps_per_epoch)
    return params, adam, log


def config_dict(cfg) -> dict:
    d = asdict(cfg)
    for k, v in d.items():
        if isinstance(v, tuple):
            d[k] = list(v)
    return d


def latent_means(params: ModelParams, grids: np.ndarray, F: np.ndarray | None = None, batch: int = 256):
    """Posterior (when ``F`` is given) or prior distributions for many inputs."""
    means, vars_ = [], []
    for i in range(0, len(grids), batch):
        if F is None:
            g = encode_prior(params, grids[i : i + batch])
        else:
            g = encode_posterior(params, grids[i : i + batch], F[i : i + batch])
        means.append(g.mean)
        vars_.append(g.var)
    return DiagGaussian(np.concatenate(means), np.concatenate(vars_))
