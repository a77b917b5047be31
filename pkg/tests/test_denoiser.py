import itertools

import numpy as np
import pytest

from retroflow.denoiser import (
    CouplingDataset,
    DenoiserOutput,
    ExactDenoiser,
    GraphFeaturizer,
    JointFeaturizer,
    TabularDenoiser,
    TrainingDiverged,
    UnreachableState,
    ce_grad,
    ce_loss,
    coordinate_posterior,
    exact_posterior,
    mean_posterior_kl,
    point_estimate,
    train_tabular,
)
from retroflow.discrete import RandomStream
from retroflow.graph import AttributedGraph, apply_permutation, flatten, tokens_to_graph, triu

# Tokens are 0-based: the two-letter vocabulary {1, 2} is {0, 1} here.
TWO_PAIR = CouplingDataset([[0], [0]], [[0], [1]], [2])


def brute_posterior(ds, x, t):
    """Loop-based Bayes over pairs; independent of the vectorized version."""
    K = int(ds.vocab_sizes.max())
    post = np.zeros((ds.n_dims, K))
    for x0, x1, w in zip(ds.x0, ds.x1, ds.weights):
        lik = w
        for d in range(ds.n_dims):
            lik *= (1 - t) * (x[d] == x0[d]) + t * (x[d] == x1[d])
        for d in range(ds.n_dims):
            post[d, x1[d]] += lik
    return post / post.sum(axis=1, keepdims=True)


def test_two_pair_bayes_values():
    assert exact_posterior(TWO_PAIR, [0], 0.5)[0, 1] == pytest.approx(1 / 3, abs=1e-12)
    assert exact_posterior(TWO_PAIR, [1], 0.5)[0, 1] == pytest.approx(1.0, abs=1e-12)


def test_single_pair_is_delta():
    ds = CouplingDataset([[0, 2, 1]], [[1, 0, 1]], [3, 3, 2])
    cases = [(0.0, [0, 2, 1])] + [(t, x) for t in (0.3, 0.9) for x in ([0, 2, 1], [1, 0, 1], [1, 2, 1])]
    for t, x in cases:
        assert np.array_equal(exact_posterior(ds, x, t), np.eye(3)[[1, 0, 1]])


def test_unreachable_state_raises():
    with pytest.raises(UnreachableState):
        exact_posterior(TWO_PAIR, [1], 0.0)
    ds = CouplingDataset([[0, 0]], [[1, 1]], [2, 2])
    with pytest.raises(UnreachableState):
        exact_posterior(ds, [1, 1], 0.0)


def test_exact_posterior_matches_brute_force():
    gen = np.random.default_rng(3)
    vs = [3, 2, 3]
    x0 = gen.integers(0, 2, size=(6, 3))
    x1 = np.column_stack([gen.integers(0, k, size=6) for k in vs])
    ds = CouplingDataset(x0, x1, vs, weights=gen.random(6))
    for t in (0.1, 0.5, 0.8):
        for x in itertools.product(*map(range, vs)):
            try:
                post = exact_posterior(ds, np.array(x), t)
            except UnreachableState:
                assert all(
                    any(x[d] not in (a[d], b[d]) for d in range(3)) for a, b in zip(ds.x0, ds.x1)
                )
                continue
            assert np.allclose(post, brute_posterior(ds, x, t), atol=1e-12)
            assert np.allclose(post.sum(-1), 1)


def test_exact_posterior_batch_shape():
    post = exact_posterior(TWO_PAIR, np.array([[0], [1], [0]]), 0.5)
    assert post.shape == (3, 1, 2)
    assert np.allclose(post[:, 0, 1], [1 / 3, 1, 1 / 3])


def test_exact_denoiser_fallback_counts():
    # From x0=(0,0), the factorized sampler can reach (1,2) although no pair explains it.
    ds = CouplingDataset([[0, 0], [0, 0]], [[1, 1], [2, 2]], [3, 3])
    strict = ExactDenoiser(ds)
    with pytest.raises(UnreachableState):
        strict(np.array([[1, 2]]), 0.5)
    loose = ExactDenoiser(ds, fallback=True)
    out = loose(np.array([[1, 2], [1, 1]]), 0.5)
    assert loose.fallbacks == 1
    assert np.allclose(out[0], coordinate_posterior(ds, [[1, 2]], 0.5)[0])
    assert np.allclose(out[0, 0], [0, 1, 0]) and np.allclose(out[0, 1], [0, 0, 1])
    assert np.allclose(out[1], exact_posterior(ds, [1, 1], 0.5))


def test_ce_loss_examples():
    x1 = flatten(AttributedGraph.from_edges([1, 0], [(0, 1, 1)]), node_vocab=2, edge_vocab=2)
    delta = np.eye(2)[x1.tokens]
    assert ce_loss(delta, x1, lambda_edge=1.0) == 0.0
    uniform = np.full((3, 2), 0.5)
    assert ce_loss(uniform, x1, lambda_edge=1.0) == pytest.approx(3 * np.log(2))
    assert ce_loss(uniform, x1, lambda_edge=0.0) == pytest.approx(2 * np.log(2))
    # With lambda = 0 a hopeless edge prediction costs nothing.
    bad = uniform.copy()
    bad[2] = 1 - delta[2]
    assert ce_loss(bad, x1, lambda_edge=0.0) == pytest.approx(2 * np.log(2))
    assert ce_loss(bad, x1, lambda_edge=1.0) == np.inf
    with pytest.raises(ValueError):
        ce_loss(uniform[:2], x1)


def test_ce_grad_finite_differences():
    gen = np.random.default_rng(0)
    for _ in range(10):
        z = gen.normal(size=(4, 5))
        target = gen.integers(0, 5, size=4)
        w = gen.random(4) + 0.5

        def f(z):
            lz = z - np.log(np.exp(z).sum(-1, keepdims=True))
            return -(w * lz[np.arange(4), target]).sum()

        g = ce_grad(z, target, w)
        num = np.zeros_like(z)
        eps = 1e-6
        for idx in np.ndindex(z.shape):
            zp, zm = z.copy(), z.copy()
            zp[idx] += eps
            zm[idx] -= eps
            num[idx] = (f(zp) - f(zm)) / (2 * eps)
        assert np.max(np.abs(g - num) / np.maximum(np.abs(num), 1e-3)) < 1e-5


def test_point_estimate():
    assert point_estimate(np.eye(3)[[2, 0]]).tolist() == [2, 0]
    assert point_estimate(np.array([[0.5, 0.5]])).tolist() == [0]
    assert point_estimate(np.array([[0.2, 0.3, 0.5]])).tolist() == [2]
    probs = np.array([[0.2, 0.3, 0.5], [1.0, 0.0, 0.0]])
    assert point_estimate(probs, "sample", np.array([0.1, 0.99])).tolist() == [0, 0]
    assert point_estimate(probs, "sample", np.array([0.45, 0.5])).tolist() == [1, 0]
    with pytest.raises(ValueError):
        point_estimate(probs, "sample")
    with pytest.raises(ValueError):
        point_estimate(probs, "mean")


def test_point_estimate_permutation_equivariant():
    gen = np.random.default_rng(1)
    probs = gen.dirichlet(np.ones(4), size=7)
    perm = gen.permutation(7)
    assert np.array_equal(point_estimate(probs[perm]), point_estimate(probs)[perm])


def test_denoiser_output_validation():
    DenoiserOutput(np.array([[0.5, 0.5, 0.0]]), np.array([2]))
    with pytest.raises(ValueError):
        DenoiserOutput(np.array([[0.5, 0.25, 0.25]]), np.array([2]))


def test_train_single_pair_converges_to_delta():
    ds = CouplingDataset([[0, 1]], [[2, 0]], [3, 2])
    # A delta target needs unbounded logits, so the KL only decays like 1/epochs.
    model = train_tabular(ds, epochs=2000, batch_size=256, rng=RandomStream(0))
    assert mean_posterior_kl(ds, model) <= 1e-3


def test_train_two_pair_matches_bayes():
    model = train_tabular(TWO_PAIR, epochs=1000, rng=RandomStream(0))
    assert mean_posterior_kl(TWO_PAIR, model) <= 5e-3
    assert model.predict([[0]], 0.5, vocab_sizes=[2])[0, 0, 1] == pytest.approx(1 / 3, abs=0.03)


def test_train_lr_zero_leaves_weights():
    model = train_tabular(TWO_PAIR, epochs=5, lr=0.0, rng=RandomStream(0))
    assert not model.W.any()
    # Constant up to summation order: duplicate samples are folded into counts.
    curve = model.meta["curve"]
    assert curve == pytest.approx([curve[0]] * len(curve), rel=1e-12)
    assert curve[0] == pytest.approx(np.log(2), rel=1e-12)


def test_train_rejects_bad_settings():
    with pytest.raises(ValueError):
        train_tabular(TWO_PAIR, epochs=0)
    with pytest.raises(ValueError):
        train_tabular(TWO_PAIR, lr=-1.0)


def test_divergence_detected():
    with pytest.raises(TrainingDiverged):
        train_tabular(TWO_PAIR, epochs=20, lr=1e4, row_mean=False, batch_size=4,
                      samples_per_pair=2, rng=RandomStream(0))


def test_training_is_deterministic():
    a = train_tabular(TWO_PAIR, epochs=20, rng=RandomStream(5))
    b = train_tabular(TWO_PAIR, epochs=20, rng=RandomStream(5))
    assert np.array_equal(a.W, b.W)


def test_checkpoint_round_trip(tmp_path):
    model = train_tabular(TWO_PAIR, epochs=20, rng=RandomStream(0))
    model.W[0, 0] = 0.1 + 0.2  # a value that needs all 17 digits
    path = tmp_path / "m.json"
    model.save(path)
    back = TabularDenoiser.load(path)
    assert np.array_equal(back.W, model.W)
    assert back.meta == model.meta
    assert back.featurizer.config() == model.featurizer.config()
    bad = model.to_dict()
    bad["version"] = 99
    with pytest.raises(ValueError):
        TabularDenoiser.from_dict(bad)


def test_joint_featurizer_limits():
    with pytest.raises(ValueError):
        JointFeaturizer([10] * 5)


def _permute_flat(tokens, n, perm):
    g = apply_permutation(tokens_to_graph(tokens, n), perm)
    i, j = triu(n)
    return np.concatenate([g.v, g.E[i, j]])


def _edge_matrix(probs, n):
    i, j = triu(n)
    M = np.zeros((n, n, probs.shape[-1]))
    M[i, j] = probs[n:]
    M[j, i] = probs[n:]
    return M


def test_graph_featurizer_permutation_equivariant():
    gen = np.random.default_rng(7)
    feat = GraphFeaturizer()
    model = TabularDenoiser(feat, 6, gen.normal(size=(feat.n_keys, 6)))
    n = 6
    src = flatten(AttributedGraph.from_edges([1, 2, 3, 1, 0, 0], [(0, 1, 1), (1, 2, 1), (2, 3, 2), (3, 0, 1)])).tokens
    prod = flatten(AttributedGraph.from_edges([1, 2, 3, 1, 0, 0], [(0, 1, 1), (1, 2, 1), (2, 3, 2)])).tokens
    x = flatten(AttributedGraph.from_edges([1, 2, 4, 1, 5, 0], [(0, 1, 1), (2, 4, 1), (2, 3, 2)])).tokens
    perm = gen.permutation(n)
    ctx = feat.static_context(src, n, prod)
    pctx = feat.static_context(_permute_flat(src, n, perm), n, _permute_flat(prod, n, perm))
    vs = np.r_[np.full(n, 6), np.full(n * (n - 1) // 2, 3)]
    p = model.predict(x, 0.4, {k: v[None] for k, v in ctx.items()}, vs)[0]
    q = model.predict(_permute_flat(x, n, perm), 0.4, {k: v[None] for k, v in pctx.items()}, vs)[0]
    assert np.allclose(q[perm], p[:n])
    Mp, Mq = _edge_matrix(p, n), _edge_matrix(q, n)
    assert np.allclose(Mq[np.ix_(perm, perm)], Mp)


def test_bind_dedupe_matches_direct():
    gen = np.random.default_rng(2)
    feat = JointFeaturizer([3, 3])
    model = TabularDenoiser(feat, 3, gen.normal(size=(feat.n_keys, 3)))
    x = gen.integers(0, 3, size=(40, 2))
    den = model.bind(vocab_sizes=[3, 3])
    assert np.allclose(den(x, 0.3), model.predict(x, 0.3, vocab_sizes=[3, 3]))
    assert np.array_equal(model.predict(x, 1.0), np.eye(3)[x])
