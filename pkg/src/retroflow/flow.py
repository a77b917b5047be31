"""Mixture-path discrete flow: conditional paths, velocities and CTMC steppers.

States are integer token arrays. Batched routines take ``x`` of shape
``(B, D)``; a denoiser is any callable ``den(x, t) -> probs`` returning
``(B, D, K)`` per-dimension categoricals (zero beyond each dimension's
vocabulary).

Randomness comes from :class:`StreamBatch`: row ``b`` of a batch draws from
stream ``ids[b]`` with a per-step counter, so a batch of trajectories and
the same trajectories run one at a time produce identical tokens.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .discrete import RandomStream, counter_uniforms, inverse_cdf
from .graph import FlatState

STEPPERS = ("euler", "rk2")


@dataclass(frozen=True)
class TimeGrid:
    steps: int

    def __post_init__(self):
        if int(self.steps) < 1:
            raise ValueError("TimeGrid needs at least one step")

    @property
    def h(self) -> float:
        return 1.0 / self.steps

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.steps + 1) / self.steps

    def intervals(self):
        """Yield ``(k, t, h)`` for every grid interval ``[t, t + h]``."""
        for k in range(self.steps):
            t = k / self.steps
            yield k, t, (k + 1) / self.steps - t


class StreamBatch:
    """One counter-based stream per batch row."""

    def __init__(self, seed: int, ids, counter: int = 0):
        self.seed = seed
        self.ids = np.asarray(ids, dtype=np.uint64).ravel()
        self.counter = counter

    @classmethod
    def of(cls, streams: list[RandomStream]) -> "StreamBatch":
        seeds = {s.seed for s in streams}
        if len(seeds) != 1:
            raise ValueError("streams in one batch must share a seed")
        return cls(seeds.pop(), [s.stream_id for s in streams])

    def __len__(self):
        return self.ids.size

    def take(self, rows) -> "StreamBatch":
        return StreamBatch(self.seed, self.ids[rows], self.counter)

    def uniforms(self, n: int, counter: int | None = None) -> np.ndarray:
        if counter is None:
            counter = self.counter
            self.counter += 1
        return counter_uniforms(self.seed, self.ids, counter, n).reshape(len(self.ids), n)


def onehot(x, k: int) -> np.ndarray:
    x = np.asarray(x)
    out = np.zeros(x.shape + (k,))
    np.put_along_axis(out, x[..., None], 1.0, axis=-1)
    return out


# -- conditional path -------------------------------------------------------

def conditional_tokens(x0, x1, t: float, u) -> np.ndarray:
    """Each coordinate takes ``x1`` when ``u < t`` and ``x0`` otherwise."""
    x0, x1 = np.asarray(x0), np.asarray(x1)
    if x0.shape != x1.shape:
        raise ValueError(f"shape mismatch {x0.shape} vs {x1.shape}")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t={t} outside [0, 1]")
    return np.where(np.asarray(u) < t, x1, x0)


def sample_conditional_state(x0, x1, t: float, rng: RandomStream):
    """Draw ``x_t`` from the convex mixture path between two endpoint states."""
    a = x0.tokens if isinstance(x0, FlatState) else np.asarray(x0)
    b = x1.tokens if isinstance(x1, FlatState) else np.asarray(x1)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    xt = conditional_tokens(a, b, t, rng.random(a.size).reshape(a.shape))
    if isinstance(x0, FlatState):
        return FlatState(xt, x0.n_nodes, x0.node_vocab, x0.edge_vocab)
    return xt


# -- velocities and kernels -------------------------------------------------

def marginal_velocity(denoised, current: int, t: float) -> np.ndarray:
    """Rate vector ``(p(x1 = .) - delta(current)) / (1 - t)``."""
    if t >= 1.0:
        raise ValueError("velocity is singular at t = 1")
    p = np.asarray(getattr(denoised, "weights", denoised), dtype=np.float64)
    return (p - onehot(current, p.shape[-1])) / (1.0 - t)


def euler_kernel(x, probs, t: float, h: float) -> np.ndarray:
    """Per-dimension transition weights ``(1 - c) delta(x) + c p`` with ``c = h / (1 - t)``.

    This is ``delta(x) + h u`` rearranged so every weight is non-negative.
    """
    _check_step(t, h)
    c = min(1.0, h / (1.0 - t))
    w = c * probs
    np.put_along_axis(w, np.asarray(x)[..., None],
                      np.take_along_axis(w, np.asarray(x)[..., None], axis=-1) + (1.0 - c), axis=-1)
    return w


def rk2_kernel(x, probs_t, x_hat, probs_th, t: float, h: float) -> tuple[np.ndarray, int]:
    """Corrector weights ``delta(x) + h/2 u_t(., x) + h/2 u_{t+h}(., x_hat)``.

    Returns the weights and the number of coordinates where a negative entry
    had to be clipped before renormalizing.
    """
    k = probs_t.shape[-1]
    u1 = (probs_t - onehot(x, k)) / (1.0 - t)
    u2 = (probs_th - onehot(x_hat, k)) / (1.0 - t - h)
    w = onehot(x, k) + 0.5 * h * u1 + 0.5 * h * u2
    neg = w < 0
    clipped = int(neg.any(axis=-1).sum())
    if clipped:
        w = np.where(neg, 0.0, w)
        w /= w.sum(axis=-1, keepdims=True)
    return w, clipped


def _check_step(t: float, h: float):
    if not (0.0 <= t < 1.0) or h <= 0 or t + h > 1.0 + 1e-12:
        raise ValueError(f"invalid step t={t}, h={h}")


def _draw(weights, streams: StreamBatch, counter: int) -> np.ndarray:
    u = streams.uniforms(weights.shape[1], counter)
    return inverse_cdf(weights, u)


def _evaluate(den, x, t):
    p = den(x, t)
    if p.shape[:2] != x.shape:
        raise ValueError(f"denoiser returned shape {p.shape} for states {x.shape}")
    return p


def euler_step_batch(x, den, t, h, streams: StreamBatch, counter: int, probs=None) -> np.ndarray:
    """One Euler transition for every row; ``probs`` reuses a precomputed ``den(x, t)``."""
    if probs is None:
        probs = _evaluate(den, x, t)
    return _draw(euler_kernel(x, probs, t, h), streams, counter)


def rk2_step_batch(x, den, t, h, streams: StreamBatch, counter: int, probs=None,
                   stats: dict | None = None) -> np.ndarray:
    """Two-stage step; the interval ending at ``t = 1`` falls back to the exact Euler collapse."""
    _check_step(t, h)
    if probs is None:
        probs = _evaluate(den, x, t)
    if t + h >= 1.0 - 1e-12:
        return _draw(euler_kernel(x, probs, t, h), streams, counter)
    x_hat = _draw(euler_kernel(x, probs, t, h), streams, counter)
    probs_hat = _evaluate(den, x_hat, t + h)
    w, clipped = rk2_kernel(x, probs, x_hat, probs_hat, t, h)
    if stats is not None:
        stats["clipped"] = stats.get("clipped", 0) + clipped
    return _draw(w, streams, counter + 1)


_STEP_FNS = {"euler": euler_step_batch, "rk2": rk2_step_batch}


def step_counter(k: int) -> int:
    """Counter slot of grid interval ``k``; each interval owns two slots."""
    return 2 * k


def simulate_batch(x0, den, grid: TimeGrid, stepper: str, streams: StreamBatch,
                   recorder: list | None = None) -> np.ndarray:
    """Run every row of ``x0`` from ``t = 0`` to ``t = 1``."""
    if stepper not in _STEP_FNS:
        raise ValueError(f"unknown stepper {stepper!r}; expected one of {STEPPERS}")
    step = _STEP_FNS[stepper]
    x = np.array(x0, dtype=np.int64)
    if x.ndim == 1:
        x = x[None]
    if recorder is not None:
        recorder.append(x.copy())
    for k, t, h in grid.intervals():
        x = step(x, den, t, h, streams, step_counter(k))
        if recorder is not None:
            recorder.append(x.copy())
    return x


# -- single-state wrappers --------------------------------------------------

def _tokens(x):
    return x.tokens if isinstance(x, FlatState) else np.asarray(x)


def _rewrap(like, tokens):
    if isinstance(like, FlatState):
        return FlatState(tokens, like.n_nodes, like.node_vocab, like.edge_vocab)
    return tokens


def euler_step(x_t, den, t: float, h: float, rng: RandomStream):
    streams = StreamBatch(rng.seed, [rng.stream_id])
    out = euler_step_batch(_tokens(x_t)[None], den, t, h, streams, rng.counter)[0]
    rng.counter += 2
    return _rewrap(x_t, out)


def rk2_step(x_t, den, t: float, h: float, rng: RandomStream):
    streams = StreamBatch(rng.seed, [rng.stream_id])
    out = rk2_step_batch(_tokens(x_t)[None], den, t, h, streams, rng.counter)[0]
    rng.counter += 2
    return _rewrap(x_t, out)


def simulate_trajectory(x0, den, grid: TimeGrid, stepper: str = "euler",
                        rng: RandomStream | None = None, recorder: list | None = None):
    """Simulate one trajectory; ``recorder`` receives the state at every grid time."""
    if rng is None:
        rng = RandomStream(0)
    streams = StreamBatch(rng.seed, [rng.stream_id], rng.counter)
    rec = [] if recorder is not None else None
    base = rng.counter
    x = np.array(_tokens(x0), dtype=np.int64)[None]
    if rec is not None:
        rec.append(x[0].copy())
    step = _STEP_FNS[stepper] if stepper in _STEP_FNS else None
    if step is None:
        raise ValueError(f"unknown stepper {stepper!r}")
    for k, t, h in grid.intervals():
        x = step(x, den, t, h, streams, base + step_counter(k))
        if rec is not None:
            rec.append(x[0].copy())
    rng.counter = base + step_counter(grid.steps)
    if recorder is not None:
        recorder.extend(_rewrap(x0, s) for s in rec)
    return _rewrap(x0, x[0])


# -- exact law of the discretized sampler ------------------------------------

def enumerate_states(vocab_sizes) -> np.ndarray:
    """All token vectors over the given per-dimension vocabularies, row-major."""
    return np.array(list(itertools.product(*[range(int(k)) for k in vocab_sizes])), dtype=np.int64)


def state_index(x, vocab_sizes) -> np.ndarray:
    """Row-major index of each state row in :func:`enumerate_states` order."""
    vs = np.asarray(vocab_sizes, dtype=np.int64)
    mult = np.concatenate([np.cumprod(vs[::-1])[::-1][1:], [1]])
    return np.asarray(x, dtype=np.int64) @ mult


def exact_terminal_law(p0, den, grid: TimeGrid, vocab_sizes) -> np.ndarray:
    """Terminal law of the Euler sampler by propagating full transition matrices.

    ``p0`` is a distribution over :func:`enumerate_states`. Feasible only for
    tiny state spaces; used as an independent oracle for the samplers.
    """
    states = enumerate_states(vocab_sizes)
    S, D = states.shape
    p = np.asarray(p0, dtype=np.float64)
    for _, t, h in grid.intervals():
        live = np.flatnonzero(p > 0)  # the denoiser need not be defined off the support
        w = euler_kernel(states[live], den(states[live], t), t, h)  # (L, D, K)
        # P[s, s'] = prod_d w[s, d, states[s', d]]
        trans = np.ones((live.size, S))
        for d in range(D):
            trans *= w[:, d, states[:, d]]
        p = p[live] @ trans
    return p
