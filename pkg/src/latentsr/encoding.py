"""Base-10 float tokens, the vocabulary table and padded id encodings."""

from __future__ import annotations

import functools
from typing import NamedTuple, Sequence

import numpy as np

from .errors import LengthError, RangeError

VOCAB_VERSION = "latentsr-vocab-1"

PAD, BOS, EOS = "PAD", "BOS", "EOS"
SPECIAL_TOKENS = (PAD, BOS, EOS)
BINARY_OPS = ("add", "sub", "mul", "div")
UNARY_OPS = ("log", "exp", "sin", "cos", "tan")
MAX_VARS = 10
VAR_TOKENS = tuple(f"x{i}" for i in range(MAX_VARS))
PLACEHOLDER = "c"
SIGN_TOKENS = ("+", "-")
MANTISSA_MAX = 9999
EXPONENT_MIN, EXPONENT_MAX = -100, 100
MANTISSA_TOKENS = tuple(str(i) for i in range(MANTISSA_MAX + 1))
EXPONENT_TOKENS = tuple(f"E{e}" for e in range(EXPONENT_MIN, EXPONENT_MAX + 1))


class NumericTokenTriple(NamedTuple):
    sign: str
    mantissa: int
    exponent: int

    def tokens(self) -> list[str]:
        return [self.sign, str(self.mantissa), f"E{self.exponent}"]


def tokenize_float(v: float) -> NumericTokenTriple:
    """Round ``v`` to four significant digits (half-even) and split it.

    The mantissa is normalized to [1000, 9999] for nonzero values; zero maps
    to ``(+, 0, 0)``.
    """
    v = float(v)
    if v == 0.0:
        return NumericTokenTriple("+", 0, 0)
    if not np.isfinite(v):
        raise RangeError(f"cannot tokenize non-finite value {v!r}")
    sign = "-" if v < 0 else "+"
    # '%.3e' is correctly rounded (ties to even on the exact binary value)
    s = "%.3e" % abs(v)
    mantissa = int(s[0] + s[2:5])
    exponent = int(s[6:]) - 3
    if not EXPONENT_MIN <= exponent <= EXPONENT_MAX:
        raise RangeError(f"exponent {exponent} of {v!r} outside [{EXPONENT_MIN}, {EXPONENT_MAX}]")
    return NumericTokenTriple(sign, mantissa, exponent)


# conservative magnitude bounds for values whose triple stays in range
MIN_MAGNITUDE = 1e-97
MAX_MAGNITUDE = 9.999e103


def representable(values) -> np.ndarray:
    """Element-wise: finite and tokenizable without an exponent overflow."""
    a = np.abs(np.asarray(values, dtype=np.float64))
    return np.isfinite(a) & ((a == 0) | ((a >= MIN_MAGNITUDE) & (a <= MAX_MAGNITUDE)))


def detokenize_float(t: NumericTokenTriple) -> float:
    sign, mantissa, exponent = t
    if mantissa == 0:
        return 0.0
    value = float(f"{mantissa}e{exponent}")
    return -value if sign == "-" else value


def round_sig4(v: float) -> float:
    """The float nearest to ``v`` rounded to four significant digits."""
    return detokenize_float(tokenize_float(v))


class Vocabulary:
    """Ordered token table; ids are positions in ``tokens``."""

    def __init__(self, tokens: Sequence[str], version: str = VOCAB_VERSION):
        self.tokens = list(tokens)
        self.version = version
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.pad_id = self.index[PAD]
        self.bos_id = self.index[BOS]
        self.eos_id = self.index[EOS]

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def ids(self, tokens: Sequence[str]) -> list[int]:
        return [self.index[t] for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[int(i)] for i in ids]


@functools.lru_cache(maxsize=None)
def default_vocabulary() -> Vocabulary:
    tokens = (
        list(SPECIAL_TOKENS)
        + list(BINARY_OPS)
        + list(UNARY_OPS)
        + list(VAR_TOKENS)
        + [PLACEHOLDER]
        + list(SIGN_TOKENS)
        + list(MANTISSA_TOKENS)
        + list(EXPONENT_TOKENS)
    )
    return Vocabulary(tokens)


def encode_equation(expr, pad_len: int, vocab: Vocabulary | None = None) -> np.ndarray:
    """BOS ... EOS followed by PAD up to ``pad_len`` as an int64 id array."""
    from .expr import to_prefix

    vocab = vocab or default_vocabulary()
    tokens = to_prefix(expr)
    if len(tokens) > pad_len:
        raise LengthError(f"prefix form has {len(tokens)} tokens, pad_len is {pad_len}")
    ids = np.full(pad_len, vocab.pad_id, dtype=np.int64)
    ids[: len(tokens)] = vocab.ids(tokens)
    return ids


def decode_equation(ids: Sequence[int], vocab: Vocabulary | None = None) -> list[str]:
    """Token strings for an id sequence (PAD kept, so from_prefix can judge it)."""
    vocab = vocab or default_vocabulary()
    return vocab.decode(ids)


def encode_samples(X, y, vocab: Vocabulary | None = None) -> np.ndarray:
    """Token ids of a numeric dataset, one row of ``3 * (D + 1)`` ids per sample.

    Row ``i`` holds the triples of ``x_i0 .. x_i(D-1), y_i`` in that order.
    """
    vocab = vocab or default_vocabulary()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] == 0:
        raise ValueError("cannot encode an empty dataset")
    if y.shape != (X.shape[0],):
        raise ValueError(f"y has shape {y.shape}, expected ({X.shape[0]},)")
    if X.shape[1] > MAX_VARS:
        raise ValueError(f"at most {MAX_VARS} variables are supported, got {X.shape[1]}")
    values = np.concatenate([X, y[:, None]], axis=1)
    index = vocab.index
    out = np.empty((values.shape[0], 3 * values.shape[1]), dtype=np.int64)
    for (i, j), v in np.ndenumerate(values):
        sign, mantissa, exponent = tokenize_float(v)
        out[i, 3 * j] = index[sign]
        out[i, 3 * j + 1] = index[str(mantissa)]
        out[i, 3 * j + 2] = index[f"E{exponent}"]
    return out


def pad_sample_grid(grid: np.ndarray, max_vars: int, vocab: Vocabulary | None = None) -> np.ndarray:
    """Widen a grid to ``max_vars`` input columns; absent variables become PAD triples.

    The ``y`` triple always occupies the last three columns.
    """
    vocab = vocab or default_vocabulary()
    grid = np.asarray(grid)
    n_vars = grid.shape[-1] // 3 - 1
    if n_vars > max_vars:
        raise ValueError(f"dataset has {n_vars} variables, model supports {max_vars}")
    if n_vars == max_vars:
        return grid
    out = np.full(grid.shape[:-1] + (3 * (max_vars + 1),), vocab.pad_id, dtype=grid.dtype)
    out[..., : 3 * n_vars] = grid[..., : 3 * n_vars]
    out[..., -3:] = grid[..., -3:]
    return out
