import numpy as np
import pytest

from retroflow.denoiser import CouplingDataset, ExactDenoiser
from retroflow.discrete import RandomStream, empirical, total_variation
from retroflow.flow import (
    StreamBatch,
    TimeGrid,
    conditional_tokens,
    enumerate_states,
    euler_kernel,
    euler_step,
    euler_step_batch,
    exact_terminal_law,
    marginal_velocity,
    rk2_kernel,
    rk2_step,
    rk2_step_batch,
    sample_conditional_state,
    simulate_batch,
    simulate_trajectory,
    state_index,
)
from retroflow.graph import AttributedGraph, FlatState, flatten


def delta_denoiser(x, t):
    x = np.atleast_2d(x)
    out = np.zeros(x.shape + (3,))
    np.put_along_axis(out, x[..., None], 1.0, axis=-1)
    return out


def test_time_grid():
    g = TimeGrid(4)
    assert g.times.tolist() == [0, 0.25, 0.5, 0.75, 1]
    assert [k for k, _, _ in g.intervals()] == [0, 1, 2, 3]
    with pytest.raises(ValueError):
        TimeGrid(0)


def test_conditional_state_boundaries(rng):
    x0 = flatten(AttributedGraph.from_edges([1, 2, 3], [(0, 1, 1)]))
    x1 = flatten(AttributedGraph.from_edges([3, 0, 1], [(1, 2, 2)]))
    assert sample_conditional_state(x0, x1, 0.0, rng) == x0
    assert sample_conditional_state(x0, x1, 1.0, rng) == x1
    with pytest.raises(ValueError):
        sample_conditional_state(x0, x1, 1.5, rng)
    with pytest.raises(ValueError):
        sample_conditional_state(np.zeros(3), np.zeros(4), 0.5, rng)


def test_conditional_state_midpoint_frequency(rng):
    x = conditional_tokens(np.zeros(100_000, int), np.ones(100_000, int), 0.5, rng.random(100_000))
    assert abs(x.mean() - 0.5) < 0.02


def test_marginal_velocity_examples():
    assert np.allclose(marginal_velocity([0, 1, 0], 1, 0.3), 0)
    assert marginal_velocity([0, 1], 0, 0.5).tolist() == [-2, 2]
    u = marginal_velocity([0.2, 0.5, 0.3], 2, 0.7)
    assert abs(u.sum()) < 1e-12 and np.all(np.delete(u, 2) >= 0)
    with pytest.raises(ValueError):
        marginal_velocity([0, 1], 0, 1.0)


def test_euler_kernel_valid_on_random_outputs():
    gen = np.random.default_rng(0)
    for _ in range(200):
        p = gen.dirichlet(np.ones(4), size=(3, 5))
        x = gen.integers(0, 4, size=(3, 5))
        t = gen.uniform(0, 0.99)
        h = gen.uniform(1e-4, 1 - t)
        w = euler_kernel(x, p, t, h)
        assert np.all(w >= 0) and np.all(w <= 1 + 1e-12)
        assert np.allclose(w.sum(-1), 1)
        # Same as delta + h u written in velocity form.
        onehot = np.eye(4)[x]
        assert np.allclose(w, onehot + h * (p - onehot) / (1 - t))


def test_euler_last_step_is_the_denoiser():
    p = np.array([[[0.1, 0.6, 0.3]]])
    assert np.allclose(euler_kernel(np.array([[2]]), p, 0.75, 0.25), p)


def test_euler_invalid_step():
    with pytest.raises(ValueError):
        euler_kernel(np.array([[0]]), np.ones((1, 1, 2)) / 2, 0.9, 0.2)


def test_last_step_law_matches_denoiser():
    p = np.array([0.1, 0.2, 0.3, 0.4])
    n = 100_000
    x = np.zeros((n, 1), dtype=int)
    den = lambda x, t: np.broadcast_to(p, x.shape + (4,))  # noqa: E731
    out = euler_step_batch(x, den, 0.9, 0.1, StreamBatch(1, np.arange(n)), 0)
    assert total_variation(empirical(out, 4), p) <= 0.02


def test_zero_velocity_never_moves(rng):
    x = np.array([0, 2, 1, 1])
    assert np.array_equal(euler_step(x, delta_denoiser, 0.2, 0.1, rng), x)
    assert np.array_equal(rk2_step(x, delta_denoiser, 0.2, 0.1, rng), x)


def test_rk2_corrector_weights_normalized():
    gen = np.random.default_rng(1)
    for _ in range(100):
        p0 = gen.dirichlet(np.ones(3), size=(2, 4))
        p1 = gen.dirichlet(np.ones(3), size=(2, 4))
        x = gen.integers(0, 3, (2, 4))
        xh = gen.integers(0, 3, (2, 4))
        t = gen.uniform(0, 0.8)
        w, clipped = rk2_kernel(x, p0, xh, p1, t, 0.05)
        assert np.allclose(w.sum(-1), 1) and np.all(w >= 0)


def test_rk2_uses_two_denoiser_calls():
    calls = []

    def den(x, t):
        calls.append(t)
        return delta_denoiser(x, t)

    rk2_step_batch(np.zeros((2, 3), int), den, 0.2, 0.1, StreamBatch(0, [1, 2]), 0)
    assert calls == [0.2, pytest.approx(0.3)]
    calls.clear()
    rk2_step_batch(np.zeros((2, 3), int), den, 0.9, 0.1, StreamBatch(0, [1, 2]), 0)
    assert calls == [0.9]


def mask_problem():
    # Source: every coordinate on the mask token 2; data over {0, 1}^2 with correlation.
    x1 = np.array([[0, 0], [1, 1], [0, 1]])
    ds = CouplingDataset(np.full_like(x1, 2), x1, np.array([3, 3]), weights=np.array([0.5, 0.3, 0.2]))
    truth = np.zeros(9)
    truth[state_index(x1, [3, 3])] = [0.5, 0.3, 0.2]
    return ds, truth


def exact_rk2_law(p0, den, grid, vocab_sizes):
    """Terminal law of the two-stage sampler, marginalizing over predictor draws."""
    S = enumerate_states(vocab_sizes)
    n, D = S.shape
    p = np.asarray(p0, float)
    for _, t, h in grid.intervals():
        live = np.flatnonzero(p > 0)
        X = S[live]
        P0 = den(X, t)
        pred = np.ones((live.size, n))
        we = euler_kernel(X, P0, t, h)
        for d in range(D):
            pred *= we[:, d, S[:, d]]
        if t + h >= 1 - 1e-12:
            p = p[live] @ pred
            continue
        trans = np.zeros((live.size, n))
        for j in np.flatnonzero(pred.any(axis=0)):
            P1 = np.broadcast_to(den(S[[j]], t + h), P0.shape)
            w, _ = rk2_kernel(X, P0, np.broadcast_to(S[j], X.shape), P1, t, h)
            tr = np.ones((live.size, n))
            for d in range(D):
                tr *= w[:, d, S[:, d]]
            trans += pred[:, [j]] * tr
        p = p[live] @ trans
    return p


def test_exact_law_converges_with_steps():
    ds, truth = mask_problem()
    den = ExactDenoiser(ds, fallback=True)
    p0 = np.eye(9)[8]
    errs = [total_variation(exact_terminal_law(p0, den, TimeGrid(T), [3, 3]), truth) for T in (5, 25, 100)]
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] <= 0.03


def test_rk2_exact_law_no_worse_than_euler():
    ds, truth = mask_problem()
    den = ExactDenoiser(ds, fallback=True)
    p0 = np.eye(9)[8]
    for T in (5, 25):
        e = total_variation(exact_terminal_law(p0, den, TimeGrid(T), [3, 3]), truth)
        r = total_variation(exact_rk2_law(p0, den, TimeGrid(T), [3, 3]), truth)
        assert r <= e + 1e-9


def test_rk2_not_worse_than_euler_in_one_dimension():
    ds = CouplingDataset(np.array([[3], [3], [3]]), np.array([[0], [1], [2]]), np.array([4]),
                         weights=np.array([0.2, 0.5, 0.3]))
    den = ExactDenoiser(ds)
    n = 100_000
    x0 = np.full((n, 1), 3)
    streams = StreamBatch(11, np.arange(n))
    truth = [0.2, 0.5, 0.3, 0.0]
    tv = {s: total_variation(empirical(simulate_batch(x0, den, TimeGrid(25), s, streams), 4), truth)
          for s in ("euler", "rk2")}
    # Both samplers are exact in one dimension, so allow for sampling noise.
    assert tv["rk2"] <= tv["euler"] + 0.01
    assert tv["euler"] <= 0.01


def test_sampler_matches_exact_law():
    ds, _ = mask_problem()
    den = ExactDenoiser(ds, fallback=True)
    grid = TimeGrid(10)
    law = exact_terminal_law(np.eye(9)[8], den, grid, [3, 3])
    n = 50_000
    xs = simulate_batch(np.full((n, 2), 2), den, grid, "euler", StreamBatch(5, np.arange(n)))
    assert total_variation(empirical(state_index(xs, [3, 3]), 9), law) <= 0.015


def test_single_step_draws_from_posterior():
    ds = CouplingDataset(np.array([[2], [2]]), np.array([[0], [1]]), np.array([3]), weights=np.array([0.25, 0.75]))
    n = 100_000
    xs = simulate_batch(np.full((n, 1), 2), ExactDenoiser(ds), TimeGrid(1), "euler", StreamBatch(1, np.arange(n)))
    assert abs(np.mean(xs == 1) - 0.75) < 0.01


def test_source_equals_data_is_fixed_point(rng):
    x = np.array([1, 0, 2])
    ds = CouplingDataset(x[None], x[None], np.array([3, 3, 3]))
    for stepper in ("euler", "rk2"):
        assert np.array_equal(simulate_trajectory(x, ExactDenoiser(ds), TimeGrid(7), stepper, rng), x)


def test_trajectory_determinism_and_recorder():
    ds, _ = mask_problem()
    den = ExactDenoiser(ds, fallback=True)
    rec = []
    a = simulate_trajectory(np.array([2, 2]), den, TimeGrid(6), "rk2", RandomStream(9, 4), recorder=rec)
    b = simulate_trajectory(np.array([2, 2]), den, TimeGrid(6), "rk2", RandomStream(9, 4))
    assert np.array_equal(a, b)
    assert len(rec) == 7 and np.array_equal(rec[-1], a)


def test_flat_state_trajectory_keeps_type():
    s = FlatState([1, 2, 0], 2)
    ds = CouplingDataset(s.tokens[None], s.tokens[None], s.vocab_sizes)
    out = simulate_trajectory(s, ExactDenoiser(ds), TimeGrid(3), "euler", RandomStream(0))
    assert out == s


def test_batch_and_serial_agree():
    ds, _ = mask_problem()
    den = ExactDenoiser(ds, fallback=True)
    streams = [RandomStream(3).child(k) for k in range(20)]
    for stepper in ("euler", "rk2"):
        batch = simulate_batch(np.full((20, 2), 2), den, TimeGrid(8), stepper, StreamBatch.of(streams))
        serial = [simulate_trajectory(np.array([2, 2]), den, TimeGrid(8), stepper, RandomStream(3).child(k))
                  for k in range(20)]
        assert np.array_equal(batch, np.array(serial))
