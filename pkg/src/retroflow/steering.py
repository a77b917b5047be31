"""Feynman-Kac steering of the flow sampler with sequential Monte Carlo.

Intermediate potentials are ``U_t = exp(sum_{s <= t} r(x_s))`` where
``r(x_s)`` is the reward of the denoiser's point estimate at ``x_s``; the
terminal potential ``exp(lam * r(x_1)) / prod_t U_t`` makes the product of
all potentials equal ``exp(lam * r(x_1))``, so the particle system targets
``p_model(x_1) exp(lam * r(x_1))``.

Proposals are the model's own transition kernel, so the incremental
importance weight is the potential alone.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .denoiser import ESTIMATES, point_estimate
from .discrete import RandomStream, inverse_cdf
from .flow import STEPPERS, StreamBatch, TimeGrid, euler_step_batch, rk2_step_batch, step_counter

log = logging.getLogger(__name__)

RESAMPLE_MODES = ("every-step", "ess-threshold")
RESAMPLE_STREAM = 0xFFFF_FFFF
ESTIMATE_COUNTER = 1 << 40  # counter offset for sampled point estimates, clear of the step slots


class DegenerateWeights(RuntimeError):
    pass


@dataclass(frozen=True)
class SteeringConfig:
    K: int = 4
    lam: float = 1.0
    resample_mode: str = "every-step"
    ess_fraction: float = 0.5
    stepper: str = "euler"
    estimate: str = "mode"

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.resample_mode not in RESAMPLE_MODES:
            raise ValueError(f"resample_mode must be one of {RESAMPLE_MODES}")
        if not 0 < self.ess_fraction <= 1:
            raise ValueError("ess_fraction must lie in (0, 1]")
        if self.stepper not in STEPPERS:
            raise ValueError(f"stepper must be one of {STEPPERS}")
        if self.estimate not in ESTIMATES:
            raise ValueError(f"estimate must be one of {ESTIMATES}")


@dataclass
class Particle:
    state: np.ndarray
    log_weight: float = 0.0
    running_reward_sum: float = 0.0
    log_potential_sum: float = 0.0
    rng: RandomStream | None = None
    ancestry: list = field(default_factory=list)
    selected: bool = False


def potential_increment(p: Particle, r_t: float, terminal: bool = False, lam: float = 1.0) -> Particle:
    """Apply one potential to ``p``.

    Intermediate steps add ``r_t`` to the running reward sum and emit
    ``log U_t`` equal to that sum. The terminal step emits
    ``lam * r_t - sum(log U_t)`` so that all emitted log-potentials add up to
    ``lam * r(x_1)``.
    """
    if not 0.0 <= r_t <= 1.0:
        raise ValueError("rewards must lie in [0, 1]")
    if terminal:
        inc = lam * r_t - p.log_potential_sum
        return replace(p, log_weight=p.log_weight + inc, log_potential_sum=p.log_potential_sum + inc)
    s = p.running_reward_sum + r_t
    return replace(p, running_reward_sum=s, log_weight=p.log_weight + s,
                   log_potential_sum=p.log_potential_sum + s)


def effective_sample_size(weights) -> float:
    w = np.asarray(weights, dtype=np.float64)
    s = w.sum(axis=-1)
    if np.any(s <= 0):
        raise DegenerateWeights("all weights are zero")
    out = s ** 2 / (w ** 2).sum(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def systematic_resample(weights, rng) -> np.ndarray:
    """Ancestor indices by systematic resampling; the output is sorted.

    ``weights`` may be a vector (one draw using ``rng.random()``) or an
    ``(R, K)`` array with ``rng`` giving one uniform per row.
    """
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and non-negative")
    single = w.ndim == 1
    w = np.atleast_2d(w)
    s = w.sum(axis=1, keepdims=True)
    if np.any(s <= 0):
        raise DegenerateWeights("cannot resample all-zero weights")
    K = w.shape[1]
    if isinstance(rng, RandomStream):
        u = np.array([rng.random() for _ in range(w.shape[0])])
    else:
        u = np.asarray(rng, dtype=np.float64).reshape(-1)
    c = np.cumsum(w / s, axis=1)
    c[:, -1] = 1.0
    pos = (u[:, None] + np.arange(K)[None]) / K
    anc = (c[:, None, :] <= pos[:, :, None]).sum(axis=-1)
    anc = np.minimum(anc, K - 1)
    # Never pick a zero-weight particle because of round-off in the cumulative sum.
    bad = np.take_along_axis(w, anc, axis=1) <= 0
    if bad.any():
        for r, k in zip(*np.nonzero(bad)):
            nz = np.flatnonzero(w[r] > 0)
            anc[r, k] = nz[np.searchsorted(nz, anc[r, k]) - 1] if anc[r, k] > nz[0] else nz[0]
        anc.sort(axis=1)
    return anc[0] if single else anc


def _normalize_log(logw):
    top = logw.max(axis=-1, keepdims=True)
    if np.any(~np.isfinite(top)):
        raise DegenerateWeights("every particle of a run has -inf log-weight")
    w = np.exp(logw - top)
    return w / w.sum(axis=-1, keepdims=True)


def intermediate_reward(den, rwd, x_t, t: float, probs=None) -> np.ndarray | float:
    """Reward of the denoiser's point estimate at ``x_t`` (one oracle call per state)."""
    x = np.atleast_2d(np.asarray(getattr(x_t, "tokens", x_t)))
    if probs is None:
        probs = den(x, t)
    r = np.asarray(rwd(point_estimate(probs)), dtype=np.float64)
    return float(r[0]) if np.ndim(getattr(x_t, "tokens", x_t)) == 1 else r


@dataclass
class SMCResult:
    states: np.ndarray          # (R, K, D) terminal particles
    log_weights: np.ndarray     # (R, K) normalized log-weights
    rewards: np.ndarray         # (R, K) terminal rewards
    log_potentials: np.ndarray  # (R, K) sum of emitted log-potentials
    chosen: np.ndarray          # (R,) index of the output particle
    ancestry: np.ndarray        # (T, R, K) ancestor indices per step
    trace: list

    @property
    def output(self) -> np.ndarray:
        return self.states[np.arange(len(self.chosen)), self.chosen]


def smc_batch(x0, den, reward, grid: TimeGrid, cfg: SteeringConfig, streams: StreamBatch,
              resample_streams: StreamBatch, record_trace: bool = False) -> SMCResult:
    """Run ``R`` independent SMC runs of ``K`` particles as one batch.

    ``streams`` has ``R * K`` rows (run-major); particle ``m`` of run ``r``
    always draws from row ``r * K + m`` whatever its ancestor. ``x0`` is one
    source state ``(D,)`` or one per particle ``(R * K, D)``.
    """
    K = cfg.K
    R = len(resample_streams)
    if len(streams) != R * K:
        raise ValueError("need one particle stream per (run, particle)")
    x = np.array(x0, dtype=np.int64)
    if x.ndim == 1:
        x = np.broadcast_to(x, (R * K, x.size)).copy()
    D = x.shape[1]
    step = euler_step_batch if cfg.stepper == "euler" else rk2_step_batch
    run_rows = np.arange(R)[:, None] * K
    logw = np.zeros((R, K))
    running = np.zeros((R, K))
    emitted = np.zeros((R, K))
    ancestry = np.empty((grid.steps, R, K), dtype=np.int64)
    trace = []
    for k, t, h in grid.intervals():
        probs = den(x, t)
        u = streams.uniforms(D, ESTIMATE_COUNTER + k) if cfg.estimate == "sample" else None
        r = np.asarray(reward(point_estimate(probs, cfg.estimate, u)), dtype=np.float64).reshape(R, K)
        running += r
        logw += running
        emitted += running
        w = _normalize_log(logw)
        ess = effective_sample_size(w)
        if cfg.resample_mode == "every-step":
            do = np.ones(R, dtype=bool)
        else:
            do = ess < cfg.ess_fraction * K
        anc = np.broadcast_to(np.arange(K), (R, K)).copy()
        if do.any():
            u = resample_streams.uniforms(1, step_counter(k))[:, 0]
            anc[do] = systematic_resample(w[do], u[do])
            rows = (run_rows + anc).ravel()
            x, probs = x[rows], probs[rows]
            running = np.take_along_axis(running, anc, axis=1)
            emitted = np.take_along_axis(emitted, anc, axis=1)
            logw = np.where(do[:, None], 0.0, logw)
        ancestry[k] = anc
        if record_trace:
            trace.append({"t": float(t), "ess": float(np.mean(ess)), "mean_reward": float(r.mean()),
                          "resampled": bool(do.any())})
        x = step(x, den, t, h, streams, step_counter(k), probs=probs)
    r1 = np.asarray(reward(x), dtype=np.float64).reshape(R, K)
    final_inc = cfg.lam * r1 - emitted
    logw = logw + final_inc
    emitted = emitted + final_inc
    w = _normalize_log(logw)
    u = resample_streams.uniforms(1, step_counter(grid.steps))[:, 0]
    chosen = inverse_cdf(w, u)
    if record_trace:
        trace.append({"t": 1.0, "ess": float(np.mean(effective_sample_size(w))),
                      "mean_reward": float(r1.mean()), "resampled": False})
    return SMCResult(x.reshape(R, K, D), np.log(np.maximum(w, 1e-300)), r1, emitted,
                     np.atleast_1d(chosen), ancestry, trace)


def particle_streams(run_streams: list[RandomStream], K: int) -> tuple[StreamBatch, StreamBatch]:
    """Particle stream ``m`` of a run is ``run.child(m)``; resampling uses a dedicated child."""
    parts = [rs.child(m) for rs in run_streams for m in range(K)]
    res = [rs.child(RESAMPLE_STREAM) for rs in run_streams]
    return StreamBatch.of(parts), StreamBatch.of(res)


def smc_run(x0_sampler, den, rwd, grid: TimeGrid, cfg: SteeringConfig, rng: RandomStream,
            record_trace: bool = False) -> list[Particle]:
    """One SMC run; returns the terminal particles with the weighted draw marked ``selected``.

    ``x0_sampler(stream)`` returns a source state per particle.
    """
    parts, res = particle_streams([rng], cfg.K)
    x0 = np.stack([np.asarray(getattr(s, "tokens", s)) for s in
                   (x0_sampler(rng.child(m)) for m in range(cfg.K))])
    out = smc_batch(x0, den, rwd, grid, cfg, parts, res, record_trace)
    particles = []
    for m in range(cfg.K):
        particles.append(Particle(
            state=out.states[0, m], log_weight=float(out.log_weights[0, m]),
            log_potential_sum=float(out.log_potentials[0, m]), rng=rng.child(m),
            ancestry=out.ancestry[:, 0, m].tolist(), selected=m == int(out.chosen[0]),
        ))
    return particles


def greedy_batch(x0, den, reward, grid: TimeGrid, K: int, streams: StreamBatch, stepper: str = "euler"):
    """Best-of-K unsteered sampling for ``R = len(streams) / K`` runs.

    Returns ``(best_states (R, D), best_rewards (R,), all_states (R, K, D))``;
    ties go to the lowest particle index.
    """
    from .flow import simulate_batch

    n = len(streams)
    if n % K:
        raise ValueError("stream count must be a multiple of K")
    x = np.array(x0, dtype=np.int64)
    if x.ndim == 1:
        x = np.broadcast_to(x, (n, x.size)).copy()
    xs = simulate_batch(x, den, grid, stepper, streams)
    r = np.asarray(reward(xs), dtype=np.float64).reshape(-1, K)
    best = r.argmax(axis=1)
    states = xs.reshape(-1, K, xs.shape[1])
    return states[np.arange(len(best)), best], r[np.arange(len(best)), best], states


def greedy_baseline_run(x0_sampler, den, rwd, grid: TimeGrid, K: int, rng: RandomStream,
                        stepper: str = "euler") -> np.ndarray:
    streams = StreamBatch.of([rng.child(m) for m in range(K)])
    x0 = np.stack([np.asarray(getattr(s, "tokens", s)) for s in
                   (x0_sampler(rng.child(m)) for m in range(K))])
    best, _, _ = greedy_batch(x0, den, rwd, grid, K, streams, stepper)
    return best[0]
