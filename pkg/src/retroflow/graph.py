"""Attributed graphs with categorical node and edge labels.

Label 0 is reserved on both sides: ``DUMMY`` for nodes and ``NO_BOND`` for
edges. Only the upper triangle of the edge matrix is ever sampled or
serialized; the lower triangle is its mirror.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

DUMMY = 0
NO_BOND = 0
DEFAULT_NODE_VOCAB = 6
DEFAULT_EDGE_VOCAB = 3
MAX_CANON_NODES = 16


@lru_cache(maxsize=64)
def triu(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Row-major upper-triangle index pair used by the flat layout."""
    i, j = np.triu_indices(n, 1)
    i.setflags(write=False)
    j.setflags(write=False)
    return i, j


class AttributedGraph:
    """Immutable labeled graph: node labels ``v`` and symmetric edge labels ``E``."""

    __slots__ = ("v", "E", "_canon")

    def __init__(self, node_labels, edge_labels=None):
        v = np.array(node_labels, dtype=np.int64).ravel()
        n = v.size
        if n < 1:
            raise ValueError("graph needs at least one node")
        if edge_labels is None:
            E = np.zeros((n, n), dtype=np.int64)
        else:
            E = np.array(edge_labels, dtype=np.int64)
        if E.shape != (n, n):
            raise ValueError(f"edge matrix shape {E.shape} does not match {n} nodes")
        if not np.array_equal(E, E.T):
            raise ValueError("edge matrix is not symmetric")
        if np.any(np.diag(E) != NO_BOND):
            raise ValueError("self-edges must be NO_BOND")
        if np.any(v < 0) or np.any(E < 0):
            raise ValueError("labels must be non-negative")
        v.setflags(write=False)
        E.setflags(write=False)
        self.v = v
        self.E = E
        self._canon = None

    @classmethod
    def from_edges(cls, node_labels, edges) -> "AttributedGraph":
        """Build from ``[(i, j, label), ...]``; each pair is mirrored."""
        n = len(node_labels)
        E = np.zeros((n, n), dtype=np.int64)
        for i, j, lab in edges:
            E[i, j] = E[j, i] = lab
        return cls(node_labels, E)

    @property
    def n(self) -> int:
        return self.v.size

    def edges(self) -> list[tuple[int, int, int]]:
        i, j = triu(self.n)
        lab = self.E[i, j]
        keep = lab != NO_BOND
        return [(int(a), int(b), int(c)) for a, b, c in zip(i[keep], j[keep], lab[keep])]

    def degrees(self) -> np.ndarray:
        return (self.E != NO_BOND).sum(axis=1)

    def with_edge(self, i: int, j: int, label: int) -> "AttributedGraph":
        E = self.E.copy()
        E[i, j] = E[j, i] = label
        return AttributedGraph(self.v, E)

    def __eq__(self, other):
        return (
            isinstance(other, AttributedGraph)
            and np.array_equal(self.v, other.v)
            and np.array_equal(self.E, other.E)
        )

    def __hash__(self):
        return hash((self.v.tobytes(), self.E.tobytes()))

    def __repr__(self):
        return f"AttributedGraph(v={self.v.tolist()}, edges={self.edges()})"

    def canonical(self) -> bytes:
        if self._canon is None:
            self._canon = canonical_form(self)
        return self._canon

    # -- JSON -------------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "n": int(self.n),
            "node_labels": [int(x) for x in self.v],
            "edges": [[i, j, lab] for i, j, lab in self.edges()],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttributedGraph":
        labels = d["node_labels"]
        if len(labels) != d["n"]:
            raise ValueError("node_labels length does not match n")
        for i, j, _ in d["edges"]:
            if not 0 <= i < j < d["n"]:
                raise ValueError(f"edge ({i}, {j}) is not an upper-triangle pair")
        return cls.from_edges(labels, d["edges"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_json(cls, s: str) -> "AttributedGraph":
        return cls.from_dict(json.loads(s))


def pad_with_dummies(g: AttributedGraph, count: int = 10) -> AttributedGraph:
    if count < 0:
        raise ValueError("count must be non-negative")
    if count == 0:
        return g
    n = g.n + count
    E = np.zeros((n, n), dtype=np.int64)
    E[: g.n, : g.n] = g.E
    v = np.concatenate([g.v, np.full(count, DUMMY, dtype=np.int64)])
    return AttributedGraph(v, E)


def apply_permutation(g: AttributedGraph, perm) -> AttributedGraph:
    """Relabel nodes so that node ``i`` moves to position ``perm[i]``."""
    perm = np.asarray(perm, dtype=np.int64)
    if sorted(perm.tolist()) != list(range(g.n)):
        raise ValueError("not a permutation")
    inv = np.empty_like(perm)
    inv[perm] = np.arange(g.n)
    return AttributedGraph(g.v[inv], g.E[np.ix_(inv, inv)])


def permute_nodes(g: AttributedGraph, rng) -> tuple[AttributedGraph, np.ndarray]:
    """Uniformly random relabeling; returns the graph and the map ``i -> perm[i]``.

    Apply the returned map to every graph that must stay node-aligned with
    ``g`` (product, synthon and reactants share one permutation).
    """
    perm = rng.permutation(g.n)
    return apply_permutation(g, perm), perm


def strip_dummies(g: AttributedGraph) -> AttributedGraph:
    """Drop DUMMY-labeled nodes that carry no edges."""
    keep = ~((g.v == DUMMY) & (g.degrees() == 0))
    if keep.all():
        return g
    if not keep.any():
        keep[0] = True
    idx = np.flatnonzero(keep)
    return AttributedGraph(g.v[idx], g.E[np.ix_(idx, idx)])


# -- canonical form ---------------------------------------------------------

def _refine_colors(g: AttributedGraph) -> list[int]:
    """Colour refinement with edge labels; colours are isomorphism-invariant ranks."""
    n = g.n
    nbrs = [[(int(g.E[i, j]), j) for j in range(n) if g.E[i, j] != NO_BOND] for i in range(n)]
    colors = [int(x) for x in g.v]
    # Re-rank the initial labels so the loop's stop test compares like with like.
    ranks = {c: r for r, c in enumerate(sorted(set(colors)))}
    colors = [ranks[c] for c in colors]
    while True:
        sigs = [(colors[i], tuple(sorted((lab, colors[j]) for lab, j in nbrs[i]))) for i in range(n)]
        ranks = {s: r for r, s in enumerate(sorted(set(sigs)))}
        new = [ranks[s] for s in sigs]
        if len(ranks) == len(set(colors)):
            return new
        colors = new


def canonical_form(g: AttributedGraph) -> bytes:
    """Permutation-invariant serialization; equal iff labeled graphs are isomorphic.

    Nodes are ordered by refined colour; within colour cells the order is the
    one giving the lexicographically smallest column-major upper triangle of
    ``E``. Branches are cut by keeping only minimal columns, by comparing
    prefixes against the best complete order found so far, and by trying one
    representative per class of twin nodes.
    """
    n = g.n
    if n > MAX_CANON_NODES:
        raise ValueError(f"canonical_form supports at most {MAX_CANON_NODES} nodes, got {n}")
    colors = _refine_colors(g)
    E = g.E.tolist()
    slot_colors = sorted(colors)
    best: list[int] | None = None
    best_order: list[int] | None = None

    def twins(x, y):
        return all(E[x][z] == E[y][z] for z in range(n) if z != x and z != y)

    def search(order, seq, placed):
        nonlocal best, best_order
        k = len(order)
        if k == n:
            if best is None or seq < best:
                best, best_order = list(seq), list(order)
            return
        c = slot_colors[k]
        groups: dict[tuple, list[int]] = {}
        for x in range(n):
            if not placed[x] and colors[x] == c:
                groups.setdefault(tuple(E[o][x] for o in order), []).append(x)
        col = min(groups)
        start = len(seq)
        seq.extend(col)
        if best is not None and seq > best[: len(seq)]:
            del seq[start:]
            return
        tried: list[int] = []
        for x in groups[col]:
            if any(twins(x, y) for y in tried):
                continue
            tried.append(x)
            placed[x] = True
            order.append(x)
            search(order, seq, placed)
            order.pop()
            placed[x] = False
            if seq > best[: len(seq)]:
                break
        del seq[start:]

    search([], [], [False] * n)
    out = bytearray(n.to_bytes(2, "big"))
    out += bytes(int(g.v[i]) for i in best_order)
    out += bytes(best)
    return bytes(out)


# -- flat token layout ------------------------------------------------------

@dataclass(frozen=True)
class FlatState:
    """Node tokens followed by the row-major upper triangle of edge tokens."""

    tokens: np.ndarray
    n_nodes: int
    node_vocab: int = DEFAULT_NODE_VOCAB
    edge_vocab: int = DEFAULT_EDGE_VOCAB
    vocab_sizes: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        t = np.array(self.tokens, dtype=np.int64).ravel()
        n = self.n_nodes
        vs = graph_vocab(n, self.node_vocab, self.edge_vocab)
        if t.size != vs.size:
            raise ValueError(f"expected {vs.size} tokens for {n} nodes, got {t.size}")
        if np.any(t < 0) or np.any(t >= vs):
            raise ValueError("token outside its vocabulary")
        t.setflags(write=False)
        object.__setattr__(self, "tokens", t)
        object.__setattr__(self, "vocab_sizes", vs)

    def __eq__(self, other):
        return (
            isinstance(other, FlatState)
            and (self.n_nodes, self.node_vocab, self.edge_vocab)
            == (other.n_nodes, other.node_vocab, other.edge_vocab)
            and np.array_equal(self.tokens, other.tokens)
        )

    def __hash__(self):
        return hash((self.tokens.tobytes(), self.n_nodes))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.n_nodes, self.node_vocab, self.edge_vocab

    def __len__(self):
        return self.tokens.size

    def to_dict(self) -> dict:
        return {
            "n_nodes": self.n_nodes,
            "node_vocab": self.node_vocab,
            "edge_vocab": self.edge_vocab,
            "tokens": [int(x) for x in self.tokens],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FlatState":
        return cls(d["tokens"], d["n_nodes"], d["node_vocab"], d["edge_vocab"])


@lru_cache(maxsize=64)
def graph_vocab(n: int, node_vocab: int, edge_vocab: int) -> np.ndarray:
    vs = np.concatenate([
        np.full(n, node_vocab, dtype=np.int64),
        np.full(n * (n - 1) // 2, edge_vocab, dtype=np.int64),
    ])
    vs.setflags(write=False)
    return vs


def flatten(g: AttributedGraph, node_vocab: int = DEFAULT_NODE_VOCAB,
            edge_vocab: int = DEFAULT_EDGE_VOCAB) -> FlatState:
    i, j = triu(g.n)
    return FlatState(np.concatenate([g.v, g.E[i, j]]), g.n, node_vocab, edge_vocab)


def unflatten(s: FlatState) -> AttributedGraph:
    return tokens_to_graph(s.tokens, s.n_nodes)


def tokens_to_graph(tokens, n: int) -> AttributedGraph:
    tokens = np.asarray(tokens)
    m = n * (n - 1) // 2
    if tokens.size != n + m:
        raise ValueError(f"{tokens.size} tokens cannot describe a {n}-node graph")
    i, j = triu(n)
    E = np.zeros((n, n), dtype=np.int64)
    E[i, j] = tokens[n:]
    E[j, i] = tokens[n:]
    return AttributedGraph(tokens[:n], E)


def n_nodes_for_tokens(count: int) -> int:
    """Inverse of ``n + n(n-1)/2``; raises if ``count`` is not such a number."""
    n = int((np.sqrt(8 * count + 1) - 1) / 2)
    for cand in (n - 1, n, n + 1):
        if cand >= 1 and cand + cand * (cand - 1) // 2 == count:
            return cand
    raise ValueError(f"{count} is not a valid flat graph length")
