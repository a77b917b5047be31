"""A synthetic fragment-join reaction world with exact oracles.

Products are two fragments joined by one single bond (the reaction
centre). Reactants are the two fragments, each carrying a leaving-group
node on the cut atom. The forward model accepts either leaving-group label,
so several reactant sets map back to one product.

Node labels: 0 dummy, 1-3 atoms, 4-5 leaving groups.
Edge labels: 0 none, 1 single, 2 double.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .discrete import RandomStream
from .features import bridges, connected_components
from .graph import (
    DUMMY,
    NO_BOND,
    AttributedGraph,
    apply_permutation,
    canonical_form,
    pad_with_dummies,
    strip_dummies,
    tokens_to_graph,
)

ATOMS = (1, 2, 3)
LEAVING = (4, 5)  # the highest labels; code relies on ``label >= LEAVING[0]``
SINGLE, DOUBLE = 1, 2
NODE_VOCAB, EDGE_VOCAB = 6, 3


@dataclass(frozen=True)
class GeneratorConfig:
    n_train: int = 2000
    n_valid: int = 100
    n_test: int = 500
    min_fragment: int = 2
    max_fragment: int = 5
    ring_prob: float = 0.6
    double_bond_prob: float = 0.2
    multi_answer_fraction: float = 0.5
    dummy_count: int = 10
    max_product_nodes: int = 12

    def __post_init__(self):
        if min(self.n_train, self.n_valid, self.n_test) < 0:
            raise ValueError("split sizes must be non-negative")
        if not 1 <= self.min_fragment <= self.max_fragment:
            raise ValueError("invalid fragment size range")
        if 2 * self.max_fragment > self.max_product_nodes:
            raise ValueError("fragments can exceed the product size cap")
        if self.dummy_count < 2:
            raise ValueError("reactants need at least two dummy slots for leaving groups")
        for p in (self.ring_prob, self.double_bond_prob, self.multi_answer_fraction):
            if not 0 <= p <= 1:
                raise ValueError("probabilities must lie in [0, 1]")


@dataclass
class Reaction:
    product: AttributedGraph
    reactants: AttributedGraph
    bridge: tuple[int, int]
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"product": self.product.to_dict(), "reactants": self.reactants.to_dict(),
                "bridge": [int(self.bridge[0]), int(self.bridge[1])]}

    @classmethod
    def from_dict(cls, d: dict) -> "Reaction":
        return cls(AttributedGraph.from_dict(d["product"]), AttributedGraph.from_dict(d["reactants"]),
                   tuple(d["bridge"]))


# -- generation ---------------------------------------------------------------

def _fragment(size: int, cfg: GeneratorConfig, gen: np.random.Generator):
    labels = gen.choice(ATOMS, size=size).tolist()
    edges = []

    def bond():
        return DOUBLE if gen.random() < cfg.double_bond_prob else SINGLE

    if size >= 3 and gen.random() < cfg.ring_prob:
        ring = int(gen.integers(3, size + 1))
        edges += [(i, (i + 1) % ring, bond()) for i in range(ring)]
        for k in range(ring, size):
            edges.append((int(gen.integers(0, k)), k, bond()))
    else:
        for k in range(1, size):
            edges.append((int(gen.integers(0, k)), k, bond()))
    return labels, edges


def _leaving_label(atom_label: int, random_choice: bool, gen: np.random.Generator) -> int:
    if random_choice:
        return int(gen.choice(LEAVING))
    return LEAVING[0] if atom_label in (1, 3) else LEAVING[1]


def generate_reaction(cfg: GeneratorConfig, rng: RandomStream, max_tries: int = 100) -> Reaction:
    gen = rng.generator()
    for attempt in range(max_tries):
        sa, sb = (int(s) for s in gen.integers(cfg.min_fragment, cfg.max_fragment + 1, size=2))
        la, ea = _fragment(sa, cfg, gen)
        lb, eb = _fragment(sb, cfg, gen)
        a, b = int(gen.integers(0, sa)), sa + int(gen.integers(0, sb))
        labels = la + lb
        edges = ea + [(i + sa, j + sa, lab) for i, j, lab in eb] + [(a, b, SINGLE)]
        product = AttributedGraph.from_edges(labels, edges)
        if product.n > cfg.max_product_nodes:
            continue
        multi = bool(gen.random() < cfg.multi_answer_fraction)
        n = product.n
        r_labels = labels + [_leaving_label(labels[a], multi, gen), _leaving_label(labels[b], multi, gen)]
        r_edges = ea + [(i + sa, j + sa, lab) for i, j, lab in eb] + [(a, n, SINGLE), (b, n + 1, SINGLE)]
        reactants = AttributedGraph.from_edges(r_labels, r_edges)
        perm = np.concatenate([gen.permutation(n), np.arange(n, n + 2)])
        product = apply_permutation(product, perm[:n])
        reactants = apply_permutation(reactants, perm)
        i, j = sorted((int(perm[a]), int(perm[b])))
        # Tie-breaking depends on node order, so check the centre after permuting.
        if (i, j) not in [c for c, _ in predict_reaction_centers(product, 2)]:
            continue
        return Reaction(product, reactants, (i, j), {"multi_answer": multi, "attempts": attempt + 1})
    raise RuntimeError("could not generate a reaction satisfying the configuration")


def generate_dataset(cfg: GeneratorConfig, rng: RandomStream) -> dict[str, list[Reaction]]:
    """Train/valid/test splits; reaction ``k`` of a split uses its own child stream."""
    out = {}
    for split_id, (name, count) in enumerate([("train", cfg.n_train), ("valid", cfg.n_valid),
                                              ("test", cfg.n_test)]):
        out[name] = [generate_reaction(cfg, rng.child(split_id, k)) for k in range(count)]
    return out


def write_reactions(path, reactions):
    with open(path, "w") as fh:
        for r in reactions:
            fh.write(json.dumps(r.to_dict(), separators=(",", ":")) + "\n")


def read_reactions(path) -> list[Reaction]:
    with open(path) as fh:
        return [Reaction.from_dict(json.loads(line)) for line in fh if line.strip()]


# -- oracles ----------------------------------------------------------------

def forward_synthesis(reactants: AttributedGraph) -> AttributedGraph | None:
    """Join two leaving-group-capped fragments; ``None`` when the rule does not apply."""
    g = strip_dummies(reactants)
    if np.any(g.v == DUMMY):
        return None
    count, comp = connected_components(g)
    if count != 2:
        return None
    deg = g.degrees()
    leaving = g.v >= LEAVING[0]
    attach = []
    for c in range(2):
        members = np.flatnonzero(comp == c)
        lv = members[leaving[members]]
        if lv.size != 1 or members.size < 2 or deg[lv[0]] != 1:
            return None
        nb = int(np.flatnonzero(g.E[lv[0]])[0])
        if leaving[nb]:
            return None
        attach.append((int(lv[0]), nb))
    keep = np.flatnonzero(~leaving)
    E = g.E.copy()
    (_, a), (_, b) = attach
    E[a, b] = E[b, a] = SINGLE
    return AttributedGraph(g.v[keep], E[np.ix_(keep, keep)])


def reward(candidate: AttributedGraph, product: AttributedGraph) -> int:
    """1 when the forward model maps ``candidate`` back onto ``product``."""
    out = forward_synthesis(candidate)
    if out is None:
        return 0
    return int(out.canonical() == strip_dummies(product).canonical())


class RewardOracle:
    """Batched, memoized reward against a fixed product, on flat token rows."""

    def __init__(self, product: AttributedGraph, n_nodes: int):
        self.product = product
        self.target = strip_dummies(product).canonical()
        self.target_size = int(np.count_nonzero(strip_dummies(product).v != DUMMY))
        self.n = n_nodes
        self.cache: dict[bytes, int] = {}
        self.calls = 0

    def _single(self, row) -> int:
        v = row[: self.n]
        # Cheap rejections before building a graph.
        if np.count_nonzero(v >= LEAVING[0]) != 2:
            return 0
        if np.count_nonzero((v > DUMMY) & (v < LEAVING[0])) != self.target_size:
            return 0
        out = forward_synthesis(tokens_to_graph(row, self.n))
        return int(out is not None and out.canonical() == self.target)

    def __call__(self, rows) -> np.ndarray:
        rows = np.atleast_2d(np.asarray(rows, dtype=np.int64))
        self.calls += len(rows)
        out = np.empty(len(rows), dtype=np.float64)
        for k, row in enumerate(rows):
            key = row.tobytes()
            r = self.cache.get(key)
            if r is None:
                r = self.cache[key] = self._single(row)
            out[k] = r
        return out


def predict_reaction_centers(product: AttributedGraph, M: int = 2) -> list[tuple[tuple[int, int], float]]:
    """Top-``M`` bridges scored by ``1 / (1 + |size(A) - size(B)|)``; ties by index pair."""
    if M < 1:
        raise ValueError("M must be at least 1")
    if not product.edges():
        raise ValueError("product has no bonds")
    scored = []
    for i, j in bridges(product):
        cut = product.with_edge(i, j, NO_BOND)
        _, comp = connected_components(cut)
        a = int(np.count_nonzero(comp == comp[i]))
        b = int(np.count_nonzero(comp == comp[j]))
        scored.append(((i, j), 1.0 / (1 + abs(a - b))))
    scored = [s for s in scored if s[1] > 0]
    scored.sort(key=lambda s: (-s[1], s[0]))
    return scored[:M]


def derive_synthons(product: AttributedGraph, center: tuple[int, int]) -> AttributedGraph:
    i, j = center
    if i == j or product.E[i, j] == NO_BOND:
        raise ValueError(f"({i}, {j}) is not a bond of the product")
    return product.with_edge(i, j, NO_BOND)


# -- ranking and metrics ----------------------------------------------------

@dataclass
class RankedPredictionSet:
    """Unique candidates with empirical-frequency scores, best first."""

    graphs: list[AttributedGraph]
    counts: list[int]
    keys: list[bytes]
    total: int

    @property
    def scores(self) -> list[float]:
        return [c / self.total for c in self.counts]

    def __len__(self):
        return len(self.graphs)

    def entries(self):
        return list(zip(self.graphs, self.scores))

    @classmethod
    def from_counts(cls, counts: dict[bytes, int], graphs: dict[bytes, AttributedGraph], total: int):
        order = sorted(counts, key=lambda k: (-counts[k], k))
        return cls([graphs[k] for k in order], [counts[k] for k in order], order, total)


def rank_by_frequency(samples, n_nodes: int | None = None) -> RankedPredictionSet:
    """Deduplicate samples up to isomorphism (after dropping unused dummies) and score by frequency.

    ``samples`` is a list of graphs, or an ``(S, D)`` token array with
    ``n_nodes`` given.
    """
    if isinstance(samples, np.ndarray):
        if samples.ndim != 2 or n_nodes is None:
            raise ValueError("token samples need shape (S, D) and n_nodes")
        uniq, inv, cnt = np.unique(samples, axis=0, return_inverse=True, return_counts=True)
        items = [(tokens_to_graph(row, n_nodes), int(c)) for row, c in zip(uniq, cnt)]
        total = len(samples)
    else:
        samples = list(samples)
        items = [(g, 1) for g in samples]
        total = len(samples)
    if total == 0:
        raise ValueError("need at least one sample")
    counts: dict[bytes, int] = {}
    graphs: dict[bytes, AttributedGraph] = {}
    for g, c in items:
        s = strip_dummies(g)
        key = s.canonical()
        counts[key] = counts.get(key, 0) + c
        graphs.setdefault(key, s)
    return RankedPredictionSet.from_counts(counts, graphs, total)


def merge_synthon_budgets(per_synthon_ranked: list[RankedPredictionSet], budgets) -> RankedPredictionSet:
    """Pool groups sampled with budgets ``N_1 .. N_M``; scores are counts over ``sum(budgets)``."""
    budgets = list(budgets)
    if len(budgets) != len(per_synthon_ranked):
        raise ValueError("one budget per synthon group required")
    if any(r.total != b for r, b in zip(per_synthon_ranked, budgets)):
        raise ValueError("group sample counts do not match budgets")
    counts: dict[bytes, int] = {}
    graphs: dict[bytes, AttributedGraph] = {}
    for r in per_synthon_ranked:
        for g, c, k in zip(r.graphs, r.counts, r.keys):
            counts[k] = counts.get(k, 0) + c
            graphs.setdefault(k, g)
    return RankedPredictionSet.from_counts(counts, graphs, sum(budgets))


def topk_metrics(pred: RankedPredictionSet, truth: Reaction, ks=(1, 3, 5, 10)) -> dict[str, dict[int, float]]:
    """Exact match, round-trip accuracy and coverage at each ``k``; missing slots count as failures."""
    truth_key = strip_dummies(truth.reactants).canonical()
    feasible = [reward(g, truth.product) for g in pred.graphs[: max(ks)]]
    out = {"exact": {}, "round_trip": {}, "coverage": {}}
    for k in ks:
        top = feasible[:k]
        out["exact"][k] = float(truth_key in pred.keys[:k])
        out["round_trip"][k] = sum(top) / k
        out["coverage"][k] = float(any(top))
    return out


def padded_source(graph: AttributedGraph, dummy_count: int) -> AttributedGraph:
    return pad_with_dummies(graph, dummy_count)


def padded_target(reaction: Reaction, dummy_count: int) -> AttributedGraph:
    """Reactants laid out on the padded product: product nodes first, then leaving groups, then dummies."""
    extra = reaction.product.n + dummy_count - reaction.reactants.n
    if extra < 0:
        raise ValueError("reactants need more nodes than the dummy budget provides")
    return pad_with_dummies(reaction.reactants, extra)


__all__ = [
    "ATOMS", "LEAVING", "GeneratorConfig", "Reaction", "RankedPredictionSet", "RewardOracle",
    "canonical_form", "derive_synthons", "forward_synthesis", "generate_dataset", "generate_reaction",
    "merge_synthon_budgets", "predict_reaction_centers", "rank_by_frequency", "read_reactions",
    "reward", "topk_metrics", "write_reactions", "padded_source", "padded_target",
]
