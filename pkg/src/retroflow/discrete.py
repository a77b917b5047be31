"""Finite-vocabulary probability primitives and counter-based random streams.

Token indices are 0-based throughout the package: a vocabulary of size ``d``
holds tokens ``0 .. d-1``.
"""

from __future__ import annotations

import numpy as np

NORM_TOL = 1e-9
RENORM_TOL = 1e-6

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


class InvalidDistribution(ValueError):
    """Raised for negative, non-finite or unnormalizable weights."""


def _splitmix(z):
    with np.errstate(over="ignore"):
        z = z + _GAMMA
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


def _combine(h, v):
    return _splitmix(np.asarray(h, dtype=np.uint64) ^ np.asarray(v, dtype=np.uint64))


def _as_u64(x):
    if isinstance(x, (int, np.integer)):
        return np.uint64(int(x) & _MASK64)
    return np.asarray(x).astype(np.uint64)


def derive_stream_id(parent: int, *ids: int) -> int:
    h = np.array([_as_u64(parent)], dtype=np.uint64)
    for i in ids:
        h = _combine(h, _as_u64(i))
    return int(h[0])


def counter_uniforms(seed, stream_ids, counter, n):
    """Uniform draws in [0, 1) addressed by (seed, stream, counter, index).

    Each value depends only on its own address, so a batch of streams gives
    the same numbers as drawing from every stream separately.

    Returns an array of shape ``stream_ids.shape + (n,)``.
    """
    sid = np.atleast_1d(np.asarray(stream_ids, dtype=np.uint64))
    h = _combine(np.full(sid.shape, _as_u64(seed), dtype=np.uint64), sid)
    h = _combine(h, _as_u64(counter))
    idx = np.arange(n, dtype=np.uint64)
    z = _combine(h[..., None], idx)
    z = _splitmix(z)
    out = (z >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
    if np.ndim(stream_ids) == 0:
        return out[0]
    return out


class RandomStream:
    """Deterministic stream keyed by ``(seed, stream_id)``.

    Draws are a pure function of the key and an internal counter, so child
    streams can be consumed in any order or concurrently without changing
    their values.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        self.counter = 0

    def __repr__(self):
        return f"RandomStream(seed={self.seed}, stream_id={self.stream_id}, counter={self.counter})"

    def child(self, *ids: int) -> "RandomStream":
        return RandomStream(self.seed, derive_stream_id(self.stream_id, *ids))

    def random(self, n: int | None = None):
        """Next ``n`` uniforms (a float when ``n`` is None); advances the counter."""
        u = counter_uniforms(self.seed, self.stream_id, self.counter, 1 if n is None else n)
        self.counter += 1
        return float(u[0]) if n is None else u

    def generator(self) -> np.random.Generator:
        """A numpy Generator seeded from this stream's key (for bulk utility draws)."""
        ss = np.random.SeedSequence([self.seed, self.stream_id, self.counter])
        self.counter += 1
        return np.random.Generator(np.random.Philox(ss))

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.random(n), kind="stable")


class Categorical:
    """Probability vector over ``size`` tokens.

    Weights summing to within ``1e-6`` of one are renormalized; anything
    further off is rejected.
    """

    __slots__ = ("weights",)

    def __init__(self, weights):
        w = np.array(weights, dtype=np.float64).ravel()
        if w.size == 0:
            raise InvalidDistribution("empty vocabulary")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise InvalidDistribution(f"weights must be finite and non-negative: {w}")
        s = w.sum()
        if abs(s - 1.0) > RENORM_TOL:
            raise InvalidDistribution(f"weights sum to {s}, not 1")
        if abs(s - 1.0) > NORM_TOL:
            w = w / s
        w.setflags(write=False)
        self.weights = w

    @property
    def size(self) -> int:
        return self.weights.size

    def __len__(self):
        return self.weights.size

    def __eq__(self, other):
        return isinstance(other, Categorical) and np.array_equal(self.weights, other.weights)

    def __repr__(self):
        return f"Categorical({self.weights.tolist()})"

    @classmethod
    def delta(cls, token: int, size: int) -> "Categorical":
        w = np.zeros(size)
        w[token] = 1.0
        return cls(w)

    @classmethod
    def uniform(cls, size: int) -> "Categorical":
        return cls(np.full(size, 1.0 / size))


def _as_categorical(p) -> Categorical:
    return p if isinstance(p, Categorical) else Categorical(p)


def sample(dist, rng: RandomStream) -> int:
    """Draw one token index from ``dist`` using one uniform of ``rng``."""
    dist = _as_categorical(dist)
    u = rng.random()
    return inverse_cdf(dist.weights, u)


def inverse_cdf(weights, u):
    """Vectorized inverse-CDF lookup along the last axis.

    Zero-weight tokens are never returned even when cumulative round-off
    leaves the last partial sum slightly below ``u``.
    """
    w = np.asarray(weights, dtype=np.float64)
    c = np.cumsum(w, axis=-1)
    u = np.asarray(u, dtype=np.float64)
    idx = (c <= u[..., None] * c[..., -1:]).sum(axis=-1)
    last = w.shape[-1] - 1 - np.argmax(w[..., ::-1] > 0, axis=-1)
    idx = np.minimum(idx, last)
    if idx.ndim == 0:
        return int(idx)
    return idx


def total_variation(p, q) -> float:
    p, q = _as_categorical(p), _as_categorical(q)
    if p.size != q.size:
        raise ValueError(f"vocabulary mismatch: {p.size} vs {q.size}")
    return 0.5 * float(np.abs(p.weights - q.weights).sum())


def kl_divergence(p, q) -> float:
    """KL(p || q); raises when q has no mass where p does."""
    p, q = _as_categorical(p), _as_categorical(q)
    if p.size != q.size:
        raise ValueError(f"vocabulary mismatch: {p.size} vs {q.size}")
    support = p.weights > 0
    if np.any(q.weights[support] <= 0):
        raise ValueError("p is not absolutely continuous with respect to q")
    pw, qw = p.weights[support], q.weights[support]
    return max(0.0, float(np.sum(pw * (np.log(pw) - np.log(qw)))))


def empirical(tokens, size: int) -> Categorical:
    counts = np.bincount(np.asarray(tokens).ravel(), minlength=size).astype(np.float64)
    return Categorical(counts / counts.sum())
