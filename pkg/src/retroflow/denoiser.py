"""Posterior models ``p(x1 | x_t)``: exact Bayes over a coupling and a trained log-linear table.

The trainable model is a sum of indicator-feature logit rows,
``logits[b, d] = sum_f W[key[b, d, f]]``, fitted by plain SGD on the
weighted cross-entropy. Featurizers decide which keys a coordinate sees:
:class:`JointFeaturizer` keys on the whole state (exact for tiny problems),
:class:`GraphFeaturizer` on local and pooled graph context.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .discrete import Categorical, RandomStream, inverse_cdf
from .flow import enumerate_states, onehot, state_index
from .graph import FlatState, triu

log = logging.getLogger(__name__)

N_BUCKETS = 16
CHECKPOINT_VERSION = 1


class UnreachableState(ValueError):
    """The observed state has zero likelihood under every coupling pair."""


class TrainingDiverged(RuntimeError):
    pass


def _tokens(x):
    return x.tokens if isinstance(x, FlatState) else np.asarray(x, dtype=np.int64)


def time_bucket(t, n_buckets: int = N_BUCKETS):
    return np.minimum((np.asarray(t) * n_buckets).astype(np.int64), n_buckets - 1)


def vocab_mask(vocab_sizes, k_max: int | None = None) -> np.ndarray:
    vs = np.asarray(vocab_sizes)
    k_max = int(vs.max()) if k_max is None else k_max
    return np.arange(k_max)[None, :] < vs[:, None]


@dataclass
class CouplingDataset:
    """Endpoint pairs ``(x0, x1)`` sharing one layout, with optional weights."""

    x0: np.ndarray
    x1: np.ndarray
    vocab_sizes: np.ndarray
    weights: np.ndarray | None = None
    n_nodes: int | None = None
    context: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x0 = np.atleast_2d(np.asarray(self.x0, dtype=np.int64))
        self.x1 = np.atleast_2d(np.asarray(self.x1, dtype=np.int64))
        self.vocab_sizes = np.asarray(self.vocab_sizes, dtype=np.int64)
        if self.x0.shape != self.x1.shape or self.x0.shape[0] == 0:
            raise ValueError("need a non-empty set of equally shaped pairs")
        if self.x0.shape[1] != self.vocab_sizes.size:
            raise ValueError("vocab_sizes does not match state length")
        for x in (self.x0, self.x1):
            if np.any(x < 0) or np.any(x >= self.vocab_sizes):
                raise ValueError("token outside its vocabulary")
        if self.weights is None:
            self.weights = np.ones(len(self.x0))
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.weights = self.weights / self.weights.sum()

    @classmethod
    def from_states(cls, pairs, weights=None) -> "CouplingDataset":
        pairs = list(pairs)
        first = pairs[0][0]
        if isinstance(first, FlatState):
            dims = first.dims
            if any(a.dims != dims or b.dims != dims for a, b in pairs):
                raise ValueError("all pairs must share (N, K_n, K_e)")
            return cls([a.tokens for a, _ in pairs], [b.tokens for _, b in pairs],
                       first.vocab_sizes, weights, n_nodes=first.n_nodes)
        raise TypeError("from_states expects FlatState pairs")

    def __len__(self):
        return len(self.x0)

    @property
    def n_dims(self) -> int:
        return self.vocab_sizes.size


# -- exact posterior ---------------------------------------------------------

def exact_posterior(ds: CouplingDataset, x_t, t: float) -> np.ndarray:
    """Bayes posterior over clean tokens for each coordinate of ``x_t``.

    A single state of shape ``(D,)`` gives ``(D, K)``; a batch ``(B, D)``
    gives ``(B, D, K)``.
    """
    x = _tokens(x_t)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    uniq, inv = np.unique(x, axis=0, return_inverse=True)
    k = int(ds.vocab_sizes.max())
    m0 = uniq[:, None, :] == ds.x0[None]
    m1 = uniq[:, None, :] == ds.x1[None]
    per_dim = (1.0 - t) * m0 + t * m1  # (U, P, D)
    with np.errstate(divide="ignore"):
        loglik = np.log(per_dim).sum(axis=-1) + np.log(ds.weights)[None]
    top = loglik.max(axis=1, keepdims=True)
    if np.any(~np.isfinite(top)):
        raise UnreachableState("state has zero likelihood under every pair")
    lik = np.exp(loglik - top)
    lik /= lik.sum(axis=1, keepdims=True)
    post = np.einsum("up,pdk->udk", lik, onehot(ds.x1, k))
    post = post[inv.ravel()]
    return post[0] if single else post


def coordinate_posterior(ds: CouplingDataset, x_t, t: float) -> np.ndarray:
    """Per-coordinate Bayes posterior ``p(x1^i | x_t^i)`` that ignores the other coordinates."""
    x = np.atleast_2d(_tokens(x_t))
    k = int(ds.vocab_sizes.max())
    lik = (1.0 - t) * (x[:, None, :] == ds.x0[None]) + t * (x[:, None, :] == ds.x1[None])  # (B, P, D)
    post = np.einsum("bpd,p,pdk->bdk", lik, ds.weights, onehot(ds.x1, k))
    z = post.sum(axis=-1, keepdims=True)
    if np.any(z <= 0):
        raise UnreachableState("a coordinate has zero likelihood under every pair")
    return post / z


class ExactDenoiser:
    """Callable wrapper of :func:`exact_posterior`; returns point masses at ``t = 1``.

    A factorized sampler can step onto states that no single pair explains
    (two coordinates moving toward different pairs in one step). With
    ``fallback=True`` such rows get :func:`coordinate_posterior` instead of
    raising :class:`UnreachableState`; ``self.fallbacks`` counts them.
    """

    def __init__(self, ds: CouplingDataset, fallback: bool = False):
        self.ds = ds
        self.fallback = fallback
        self.fallbacks = 0

    def __call__(self, x, t):
        x = np.asarray(x)
        if t >= 1.0:
            return onehot(x, int(self.ds.vocab_sizes.max()))
        if not self.fallback:
            return exact_posterior(self.ds, x, t)
        xs = np.atleast_2d(x)
        ok = _reachable(self.ds, xs, t)
        out = np.empty(xs.shape + (int(self.ds.vocab_sizes.max()),))
        if ok.any():
            out[ok] = exact_posterior(self.ds, xs[ok], t)
        if not ok.all():
            self.fallbacks += int((~ok).sum())
            out[~ok] = coordinate_posterior(self.ds, xs[~ok], t)
        return out[0] if x.ndim == 1 else out


def _reachable(ds: CouplingDataset, x, t: float) -> np.ndarray:
    hit0 = x[:, None, :] == ds.x0[None]
    hit1 = x[:, None, :] == ds.x1[None]
    if t <= 0.0:
        cons = hit0.all(axis=-1)
    else:
        cons = (hit0 | hit1).all(axis=-1)
    return (cons & (ds.weights[None] > 0)).any(axis=1)


# -- loss and point estimate ------------------------------------------------

def dim_weights(n_dims: int, n_nodes: int | None, lambda_edge: float) -> np.ndarray:
    w = np.ones(n_dims)
    if n_nodes is not None:
        w[n_nodes:] = lambda_edge
    return w


def ce_loss(out, x1, lambda_edge: float = 2.0, n_nodes: int | None = None) -> float:
    """``-sum_nodes log p(v1) - lambda * sum_edges log p(E1)``.

    Returns ``inf`` (with an overflow warning logged) when a target token has
    zero predicted mass.
    """
    if isinstance(x1, FlatState):
        n_nodes = x1.n_nodes
    target = _tokens(x1)
    probs = np.asarray(getattr(out, "probs", out), dtype=np.float64)
    if probs.shape[:-1] != target.shape:
        raise ValueError(f"output shape {probs.shape} does not match target {target.shape}")
    p = np.take_along_axis(probs, target[..., None], axis=-1)[..., 0]
    w = dim_weights(target.shape[-1], n_nodes, lambda_edge)
    active = w > 0
    if np.any(p[..., active] <= 0):
        log.warning("zero predicted mass on a target token; loss overflows")
        return float("inf")
    return float(-(w[active] * np.log(p[..., active])).sum())


ESTIMATES = ("mode", "sample")


def point_estimate(out, kind: str = "mode", u=None) -> np.ndarray:
    """A single clean state read off a denoiser output.

    ``kind="mode"`` takes the per-coordinate argmax (ties to the lowest
    token); ``kind="sample"`` draws each coordinate by inverse CDF from the
    uniforms ``u`` (same shape as the state).
    """
    probs = np.asarray(getattr(out, "probs", out))
    if kind == "mode":
        return probs.argmax(axis=-1)
    if kind == "sample":
        if u is None:
            raise ValueError("sampled point estimates need uniforms")
        return inverse_cdf(probs, u)
    raise ValueError(f"kind must be one of {ESTIMATES}")


@dataclass
class DenoiserOutput:
    probs: np.ndarray
    vocab_sizes: np.ndarray

    def __post_init__(self):
        for d, k in enumerate(self.vocab_sizes):
            Categorical(self.probs[d, :k])
            if np.any(self.probs[d, k:] != 0):
                raise ValueError(f"mass outside vocabulary at dimension {d}")

    def categorical(self, d: int) -> Categorical:
        return Categorical(self.probs[d, : self.vocab_sizes[d]])

    def __len__(self):
        return len(self.vocab_sizes)


# -- featurizers --------------------------------------------------------------

class JointFeaturizer:
    """One key per (time bucket, dimension, full state); exact for tiny spaces."""

    kind = "joint"

    def __init__(self, vocab_sizes, n_buckets: int = N_BUCKETS, max_states: int = 4096):
        self.vocab_sizes = np.asarray(vocab_sizes, dtype=np.int64)
        self.n_buckets = n_buckets
        self.n_states = int(np.prod(self.vocab_sizes))
        if self.n_states > max_states:
            raise ValueError(f"{self.n_states} states is too many for a joint table")
        self.n_keys = n_buckets * self.vocab_sizes.size * self.n_states

    def config(self) -> dict:
        return {"kind": self.kind, "vocab_sizes": self.vocab_sizes.tolist(), "n_buckets": self.n_buckets}

    def keys(self, x, bucket, context=None) -> np.ndarray:
        x = np.atleast_2d(x)
        s = state_index(x, self.vocab_sizes)
        D = self.vocab_sizes.size
        b = np.broadcast_to(np.asarray(bucket), s.shape)
        k = (b[:, None] * D + np.arange(D)[None]) * self.n_states + s[:, None]
        return k[..., None]


def _pair_code(a, b, k):
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    return lo * k + hi


class GraphFeaturizer:
    """Local and pooled context of every node and edge coordinate.

    ``context`` carries the source graph (``src``, flat tokens) and, for
    synthon-conditioned models, the product (``prod``, flat tokens). Keys
    are shared across positions, so the model is equivariant to node
    relabeling.
    """

    kind = "graph"
    LEAVING = (4, 5)
    CAP = 3

    def __init__(self, node_vocab: int = 6, edge_vocab: int = 3, n_buckets: int = N_BUCKETS):
        self.kn, self.ke, self.n_buckets = node_vocab, edge_vocab, n_buckets
        c = self.CAP + 1
        kn, ke = node_vocab, edge_vocab
        self.node_groups = [
            ("own_src", kn * kn),
            ("own_deg", kn * c),
            ("own_nleave", kn * c),
            ("own_src_sdeg_ring", kn * kn * c * 2),
            ("own_site", kn * 2 * 2),
            ("own_nattach", kn * c),
            ("own_nbr", kn * kn),
        ]
        self.edge_groups = [
            ("own_src", ke * ke),
            ("own_labels", ke * kn * kn),
            ("own_src_ring_sdeg", ke * ke * 3 * c * c),
            ("own_deg", ke * c * c),
            ("own_nbroken", ke * c),
            ("own_src_site", ke * ke * 3 * kn * kn),
            ("own_src_leave", ke * ke * 3),
        ]
        self.offsets = {}
        off = 0
        for name, size in [("n_" + g, s) for g, s in self.node_groups] + [("e_" + g, s) for g, s in self.edge_groups]:
            self.offsets[name] = off
            off += size * n_buckets
        self.sizes = dict([("n_" + g, s) for g, s in self.node_groups] + [("e_" + g, s) for g, s in self.edge_groups])
        self.n_keys = off
        self.n_features = len(self.node_groups)
        assert len(self.node_groups) == len(self.edge_groups)

    def config(self) -> dict:
        return {"kind": self.kind, "node_vocab": self.kn, "edge_vocab": self.ke, "n_buckets": self.n_buckets}

    @staticmethod
    def static_context(src_tokens, n: int, prod_tokens=None) -> dict:
        """Per-graph arrays that do not change along a trajectory."""
        from .features import cycle_node_features
        from .graph import tokens_to_graph

        src = np.asarray(src_tokens, dtype=np.int64)
        g = tokens_to_graph(src, n)
        x3, x4, x5 = cycle_node_features(g)
        ring = ((x3 + x4 + x5) > 0).astype(np.int64)
        sdeg = g.degrees()
        if prod_tokens is not None:
            pdeg = tokens_to_graph(np.asarray(prod_tokens), n).degrees()
            site = (pdeg > sdeg).astype(np.int64)
        else:
            site = np.zeros(n, dtype=np.int64)
        return {"src": src, "ring": ring, "sdeg": sdeg, "site": site}

    def keys(self, x, bucket, context) -> np.ndarray:
        x = np.atleast_2d(x)
        B, D = x.shape
        src = np.atleast_2d(context["src"])
        n = _n_from_len(D)
        i, j = triu(n)
        cap = self.CAP
        kn, ke = self.kn, self.ke
        ring = np.atleast_2d(context["ring"])
        sdeg = np.minimum(np.atleast_2d(context["sdeg"]), cap)
        static_site = np.atleast_2d(context["site"])
        b = np.broadcast_to(np.asarray(bucket).reshape(-1, 1) if np.ndim(bucket) else np.asarray(bucket), (B, 1))

        v, e = x[:, :n], x[:, n:]
        sv, se = src[:, :n], src[:, n:]
        inc = _incidence(n)
        bonded = e != 0
        deg = (bonded.astype(np.float64) @ inc).astype(np.int64)
        degc = np.minimum(deg, cap)
        broken = (se != 0) & ~bonded
        brk = broken.astype(np.float64) @ inc
        # Largest label among bonded neighbours (0 when isolated).
        adj = np.zeros((B, n, n), dtype=np.int64)
        adj[:, i, j] = bonded
        adj[:, j, i] = bonded
        nbr = (adj * v[:, None, :]).max(axis=2)
        site = np.maximum(static_site, (brk > 0).astype(np.int64))
        nleave = np.minimum((v >= self.LEAVING[0]).sum(axis=1, keepdims=True), cap)
        nattach = np.minimum(((sv == 0) & (deg > 0)).sum(axis=1, keepdims=True), cap)
        nbroken = np.minimum(broken.sum(axis=1, keepdims=True), cap)

        def key(name, code):
            return self.offsets[name] + b * self.sizes[name] + code

        nk = np.stack(np.broadcast_arrays(
            key("n_own_src", v * kn + sv),
            key("n_own_deg", v * (cap + 1) + degc),
            key("n_own_nleave", v * (cap + 1) + nleave),
            key("n_own_src_sdeg_ring", ((v * kn + sv) * (cap + 1) + sdeg) * 2 + ring),
            key("n_own_site", (v * 2 + site) * 2 + (sv == 0)),
            key("n_own_nattach", v * (cap + 1) + nattach),
            key("n_own_nbr", v * kn + nbr),
        ), axis=-1)

        ring_e = ring[:, i] + ring[:, j]
        sdeg_lo = np.minimum(sdeg[:, i], sdeg[:, j])
        sdeg_hi = np.maximum(sdeg[:, i], sdeg[:, j])
        deg_lo = np.minimum(degc[:, i], degc[:, j])
        deg_hi = np.maximum(degc[:, i], degc[:, j])
        lab = _pair_code(v[:, i], v[:, j], kn)
        si, sj = site[:, i], site[:, j]
        ek = np.stack(np.broadcast_arrays(
            key("e_own_src", e * ke + se),
            key("e_own_labels", e * kn * kn + lab),
            key("e_own_src_ring_sdeg", (((e * ke + se) * 3 + ring_e) * (cap + 1) + sdeg_lo) * (cap + 1) + sdeg_hi),
            key("e_own_deg", (e * (cap + 1) + deg_lo) * (cap + 1) + deg_hi),
            key("e_own_nbroken", e * (cap + 1) + nbroken),
            key("e_own_src_site", ((e * ke + se) * 3 + (si + sj)) * kn * kn + lab),
            key("e_own_src_leave", (e * ke + se) * 3 + (v[:, i] >= self.LEAVING[0]) + (v[:, j] >= self.LEAVING[0])),
        ), axis=-1)
        return np.concatenate([nk, ek], axis=1)


@lru_cache(maxsize=64)
def _incidence(n: int) -> np.ndarray:
    i, j = triu(n)
    inc = np.zeros((i.size, n))
    inc[np.arange(i.size), i] = 1.0
    inc[np.arange(i.size), j] = 1.0
    inc.setflags(write=False)
    return inc


def _n_from_len(D: int) -> int:
    n = int((np.sqrt(8 * D + 1) - 1) / 2)
    while n + n * (n - 1) // 2 < D:
        n += 1
    if n + n * (n - 1) // 2 != D:
        raise ValueError(f"{D} is not a flat graph length")
    return n


def featurizer_from_config(cfg: dict):
    if cfg["kind"] == "joint":
        return JointFeaturizer(cfg["vocab_sizes"], cfg["n_buckets"])
    if cfg["kind"] == "graph":
        return GraphFeaturizer(cfg["node_vocab"], cfg["edge_vocab"], cfg["n_buckets"])
    raise ValueError(f"unknown featurizer {cfg['kind']!r}")


# -- trainable model --------------------------------------------------------

class TabularDenoiser:
    """Log-linear posterior model over indicator features."""

    def __init__(self, featurizer, k_max: int, weights=None, meta: dict | None = None):
        self.featurizer = featurizer
        self.k_max = k_max
        self.W = np.zeros((featurizer.n_keys, k_max)) if weights is None else np.asarray(weights, dtype=np.float64)
        if self.W.shape != (featurizer.n_keys, k_max):
            raise ValueError("weight table shape does not match featurizer")
        self.meta = dict(meta or {})

    def logits(self, x, t, context=None, vocab_sizes=None):
        keys = self.featurizer.keys(x, time_bucket(t, self.featurizer.n_buckets), context)
        z = self.W[keys[..., 0]]
        for f in range(1, keys.shape[-1]):
            z += self.W[keys[..., f]]
        if vocab_sizes is not None:
            z = np.where(vocab_mask(vocab_sizes, self.k_max)[None], z, -np.inf)
        return z, keys

    def predict(self, x, t, context=None, vocab_sizes=None) -> np.ndarray:
        """Posterior probabilities ``(B, D, K)``; point masses on ``x`` at ``t >= 1``."""
        x = np.atleast_2d(np.asarray(x, dtype=np.int64))
        if np.ndim(t) == 0 and t >= 1.0:
            return onehot(x, self.k_max)
        z, _ = self.logits(x, t, context, vocab_sizes)
        return _softmax(z)

    def bind(self, context=None, vocab_sizes=None, dedupe: bool = True):
        """A ``den(x, t)`` callable with fixed conditioning context.

        With ``dedupe`` (valid when ``context`` is shared by every row) each
        distinct state is evaluated once per call.
        """
        def den(x, t):
            x = np.atleast_2d(np.asarray(x, dtype=np.int64))
            if not dedupe or len(x) < 8:
                return self.predict(x, t, context, vocab_sizes)
            uniq, inv = _unique_rows(x)
            return self.predict(uniq, t, context, vocab_sizes)[inv]
        return den

    # -- persistence ----------------------------------------------------
    def to_dict(self) -> dict:
        nz = np.flatnonzero(np.any(self.W != 0, axis=1))
        return {
            "version": CHECKPOINT_VERSION,
            "featurizer": self.featurizer.config(),
            "k_max": self.k_max,
            "meta": self.meta,
            "rows": nz.tolist(),
            "weights": [[float(w) for w in self.W[r]] for r in nz],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TabularDenoiser":
        if d.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {d.get('version')}")
        feat = featurizer_from_config(d["featurizer"])
        W = np.zeros((feat.n_keys, d["k_max"]))
        if d["rows"]:
            W[np.asarray(d["rows"])] = np.asarray(d["weights"], dtype=np.float64)
        return cls(feat, d["k_max"], W, d["meta"])

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, separators=(",", ":"))

    @classmethod
    def load(cls, path) -> "TabularDenoiser":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


_ROW_HASH = np.random.default_rng(0x5EED).integers(1, 2**62, size=4096, dtype=np.int64) | 1


def _unique_rows(x):
    """Distinct rows and the inverse map, via a 64-bit row hash checked for collisions."""
    D = x.shape[1]
    if D > _ROW_HASH.size:
        uniq, inv = np.unique(x, axis=0, return_inverse=True)
        return uniq, inv.ravel()
    with np.errstate(over="ignore"):
        h = x @ _ROW_HASH[:D]
    _, first, inv = np.unique(h, return_index=True, return_inverse=True)
    uniq = x[first]
    if not np.array_equal(uniq[inv], x):
        uniq, inv = np.unique(x, axis=0, return_inverse=True)
    return uniq, inv.ravel()


def _softmax(z):
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=-1, keepdims=True)


def ce_grad(logits, target, weights) -> np.ndarray:
    """Gradient of ``-sum w log softmax(logits)[target]`` with respect to the logits."""
    p = _softmax(logits)
    p = np.where(np.isfinite(logits), p, 0.0)
    g = p - onehot(target, logits.shape[-1])
    return g * weights[..., None]


@dataclass
class TrainingGroup:
    """Pairs that share a layout, plus per-pair featurizer context."""

    ds: CouplingDataset
    context: dict | None = None


def train_tabular(data, grid=None, epochs: int = 1000, lr: float = 1.0, lambda_edge: float = 2.0,
                  rng: RandomStream | None = None, featurizer=None, batch_size: int = 8192,
                  samples_per_pair: int | None = None, row_mean: bool = True) -> TabularDenoiser:
    """Fit a :class:`TabularDenoiser` by minibatch SGD on the cross-entropy.

    ``data`` is a :class:`CouplingDataset` or a list of :class:`TrainingGroup`
    (graphs of different sizes). Each epoch draws ``samples_per_pair`` fresh
    ``(t, x_t)`` per pair with ``t ~ U(0, 1)``; by default enough to fill
    one batch. With ``row_mean`` each table
    row is updated by the average gradient of the samples that touched it;
    otherwise the gradient is averaged over the whole minibatch.
    """
    if epochs <= 0 or lr < 0:
        raise ValueError("epochs must be positive and lr non-negative")
    groups = [TrainingGroup(data)] if isinstance(data, CouplingDataset) else list(data)
    if featurizer is None:
        featurizer = JointFeaturizer(groups[0].ds.vocab_sizes)
    rng = rng or RandomStream(0)
    k_max = int(max(g.ds.vocab_sizes.max() for g in groups))
    model = TabularDenoiser(featurizer, k_max, meta={
        "lr": lr, "epochs": epochs, "lambda_edge": lambda_edge, "batch_size": batch_size,
        "samples_per_pair": samples_per_pair,
        "row_mean": row_mean,
        "grid_steps": getattr(grid, "steps", None),
    })
    curve = []
    initial = None
    strikes = 0
    gen = rng.generator()
    for epoch in range(epochs):
        total, count = 0.0, 0
        for gi in gen.permutation(len(groups)):
            g = groups[gi]
            ds = g.ds
            spp = samples_per_pair or max(1, batch_size // len(ds))
            idx = np.repeat(np.arange(len(ds)), spp)
            idx = idx[gen.permutation(idx.size)]
            mask = vocab_mask(ds.vocab_sizes, k_max)
            w_dim = dim_weights(ds.n_dims, ds.n_nodes, lambda_edge)
            for start in range(0, idx.size, batch_size):
                rows = idx[start:start + batch_size]
                t = gen.random(rows.size)
                u = gen.random((rows.size, ds.n_dims))
                xt = np.where(u < t[:, None], ds.x1[rows], ds.x0[rows])
                ctx = None if g.context is None else {k: v[rows] for k, v in g.context.items()}
                keys = model.featurizer.keys(xt, time_bucket(t, model.featurizer.n_buckets), ctx)
                B = rows.size
                # Samples with the same pair and the same feature keys have identical
                # gradients, so each distinct one is evaluated once and weighted by its count.
                sig, inv = _unique_rows(np.concatenate([rows[:, None], keys.reshape(B, -1)], axis=1))
                mult = np.bincount(inv, minlength=sig.shape[0]).astype(np.float64)
                urows, keys = sig[:, 0], sig[:, 1:].reshape(-1, *keys.shape[1:])
                z = model.W[keys[..., 0]]
                for f in range(1, keys.shape[-1]):
                    z += model.W[keys[..., f]]
                z = np.where(mask[None], z, -np.inf)
                target = ds.x1[urows]
                pw = ds.weights[urows] * len(ds) * mult
                lw = pw[:, None] * w_dim[None]
                # One log-softmax serves both the loss and the gradient (same as ce_grad).
                logq = z - _logsumexp(z)
                logp = np.take_along_axis(logq, target[..., None], axis=-1)[..., 0]
                total += float(-(lw * logp).sum())
                count += B
                grad = np.exp(logq)
                np.put_along_axis(grad, target[..., None], np.take_along_axis(grad, target[..., None], -1) - 1, -1)
                grad *= lw[..., None] / B
                F = keys.shape[-1]
                flat = keys.reshape(-1)
                g2 = np.repeat(grad.reshape(-1, k_max), F, axis=0)
                n_rows = model.W.shape[0]
                gW = np.stack([np.bincount(flat, weights=g2[:, c], minlength=n_rows) for c in range(k_max)], axis=1)
                if row_mean:
                    # Each table row steps along the mean residual of the samples that hit it.
                    hits = np.bincount(flat, weights=np.repeat(mult, flat.size // mult.size), minlength=n_rows)
                    gW /= np.maximum(hits, 1)[:, None] / B
                model.W -= lr * gW
        mean = total / max(count, 1)
        curve.append(mean)
        if initial is None:
            initial = mean
        strikes = strikes + 1 if mean > 10 * initial else 0
        if strikes >= 3:
            raise TrainingDiverged(f"loss {mean:.4g} exceeded 10x initial {initial:.4g} for 3 epochs")
    model.meta["curve"] = curve
    return model


def _logsumexp(z):
    m = z.max(axis=-1, keepdims=True)
    return m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def mean_posterior_kl(ds: CouplingDataset, model: TabularDenoiser, n_buckets: int = N_BUCKETS,
                      context=None) -> float:
    """Visit-weighted KL(exact || model) averaged over bucket midpoints.

    At each midpoint ``t`` every reachable state is weighted by its path
    probability ``p_t(x_t)``; per-dimension KLs are summed over dimensions.
    """
    states = enumerate_states(ds.vocab_sizes)
    total = 0.0
    for b in range(n_buckets):
        t = (b + 0.5) / n_buckets
        m0 = states[:, None, :] == ds.x0[None]
        m1 = states[:, None, :] == ds.x1[None]
        pt = (((1 - t) * m0 + t * m1).prod(axis=-1) * ds.weights[None]).sum(axis=1)
        reach = pt > 0
        exact = exact_posterior(ds, states[reach], t)
        learned = model.predict(states[reach], t, context, ds.vocab_sizes)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(exact > 0, exact * (np.log(exact) - np.log(learned)), 0.0)
        kl = terms.sum(axis=(-1, -2))
        total += float((pt[reach] * kl).sum() / pt[reach].sum())
    return total / n_buckets
