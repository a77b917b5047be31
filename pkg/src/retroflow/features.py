"""Cycle-count features from adjacency powers, with a brute-force counter.

Node features ``X3, X4, X5`` count the k-cycles through each node; graph
features ``y3 .. y6`` count k-cycles in the whole graph.
"""

from __future__ import annotations

import numpy as np

from .graph import NO_BOND, AttributedGraph

MAX_NODES = 64
RESIDUAL_TOL = 1e-6


class FeatureResidualError(ArithmeticError):
    """A closed-form count landed away from an integer."""


def binary_adjacency(g) -> np.ndarray:
    if isinstance(g, AttributedGraph):
        return (g.E != NO_BOND).astype(np.int64)
    A = (np.asarray(g) != 0).astype(np.int64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("adjacency must be square")
    if not np.array_equal(A, A.T) or np.any(np.diag(A)):
        raise ValueError("adjacency must be symmetric with zero diagonal")
    return A


def _to_int(x, what):
    r = np.rint(x)
    if np.max(np.abs(x - r), initial=0.0) >= RESIDUAL_TOL:
        raise FeatureResidualError(f"{what} is not integral: {x}")
    return r.astype(np.int64)


def _powers(A):
    if A.shape[0] > MAX_NODES:
        raise ValueError(f"cycle features support at most {MAX_NODES} nodes")
    Af = A.astype(np.float64)
    P = {1: Af}
    for k in range(2, 7):
        P[k] = P[k - 1] @ Af
    return P


def cycle_node_features(g, printed_x5: bool = False) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-node counts of 3-, 4- and 5-cycles through each node.

    ``printed_x5`` selects the commonly quoted 5-cycle expression, which
    omits the correction for triangles sharing an edge and therefore
    overcounts on graphs such as K4 or K5. It is kept for comparison only.
    """
    A = binary_adjacency(g)
    P = _powers(A)
    Af = P[1]
    d = Af.sum(axis=1)
    a3 = np.diag(P[3])
    x3 = a3 / 2
    x4 = (np.diag(P[4]) - d * (d - 1) - Af @ d) / 2
    if printed_x5:
        x5 = (np.diag(P[5]) - 2 * a3 * d - Af @ a3 + a3) / 2
    else:
        # Closed 5-walks that wind a triangle plus one back-and-forth step.
        x5 = (np.diag(P[5]) - 2 * a3 * d - Af @ a3 + 5 * a3 - 2 * (Af * P[2]) @ d) / 2
    return _to_int(x3, "X3"), _to_int(x4, "X4"), _to_int(x5, "X5")


def cycle_graph_features(g) -> tuple[int, int, int, int]:
    """Total counts of 3-, 4-, 5- and 6-cycles."""
    A = binary_adjacency(g)
    x3, x4, x5 = cycle_node_features(A)
    P = _powers(A)
    Af = P[1]
    d = np.diag(P[2])
    c6 = (
        np.trace(P[6])
        - 3 * np.sum(np.diag(P[3]) ** 2)
        + 9 * np.sum(Af * P[2] ** 2)
        - 6 * np.dot(d, np.diag(P[4]))
        + 6 * np.trace(P[4])
        - 4 * np.trace(P[3])
        + 4 * np.sum(d ** 3)
        + 3 * np.sum(P[3])
        - 12 * np.sum(d ** 2)
        + 4 * np.trace(P[2])
    ) / 12
    y3 = _to_int(x3.sum() / 3, "y3")
    y4 = _to_int(x4.sum() / 4, "y4")
    y5 = _to_int(x5.sum() / 5, "y5")
    y6 = _to_int(np.array(c6), "y6")
    return int(y3), int(y4), int(y5), int(y6)


def brute_force_cycles(g, max_len: int = 6) -> tuple[dict[int, int], dict[int, np.ndarray]]:
    """Enumerate simple cycles of length 3..max_len by depth-first search.

    Each cycle is rooted at its smallest node and walked in both directions,
    so every cycle is found exactly twice.
    """
    A = binary_adjacency(g)
    n = A.shape[0]
    nbrs = [np.flatnonzero(A[i]).tolist() for i in range(n)]
    totals = {k: 0 for k in range(3, max_len + 1)}
    per_node = {k: np.zeros(n, dtype=np.int64) for k in range(3, max_len + 1)}

    def dfs(root, path, on_path):
        last = path[-1]
        for nxt in nbrs[last]:
            if nxt == root and len(path) >= 3:
                k = len(path)
                totals[k] += 1
                for v in path:
                    per_node[k][v] += 1
            elif nxt > root and not on_path[nxt] and len(path) < max_len:
                on_path[nxt] = True
                path.append(nxt)
                dfs(root, path, on_path)
                path.pop()
                on_path[nxt] = False

    for root in range(n):
        on_path = [False] * n
        on_path[root] = True
        dfs(root, [root], on_path)
    totals = {k: c // 2 for k, c in totals.items()}
    per_node = {k: c // 2 for k, c in per_node.items()}
    return totals, per_node


def _components(n: int, edges) -> tuple[int, np.ndarray]:
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i, j in edges:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
    # Roots are the smallest member, so numbering roots in index order is first-seen order.
    ids, labels = {}, np.empty(n, dtype=np.int64)
    for v in range(n):
        labels[v] = ids.setdefault(find(v), len(ids))
    return len(ids), labels


def connected_components(g) -> tuple[int, np.ndarray]:
    """Component count and per-node ids numbered in order of first appearance (union-find)."""
    A = binary_adjacency(g)
    i, j = np.nonzero(np.triu(A, 1))
    return _components(A.shape[0], zip(i.tolist(), j.tolist()))


def bridges(g) -> list[tuple[int, int]]:
    """Edges whose removal increases the number of connected components."""
    A = binary_adjacency(g)
    n = A.shape[0]
    i_idx, j_idx = np.nonzero(np.triu(A, 1))
    edges = list(zip(i_idx.tolist(), j_idx.tolist()))
    base, _ = _components(n, edges)
    return [e for k, e in enumerate(edges) if _components(n, edges[:k] + edges[k + 1:])[0] > base]
