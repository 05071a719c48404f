"""Generation and prediction metrics at desk scale.

Molecule-style validity uses a valence oracle (bond-order-weighted degree
capped per node category, plus connectivity) instead of a chemistry toolkit.
Uniqueness and novelty count isomorphism classes: exhaustive permutation
canonicalization up to 8 nodes, a 3-round refinement hash with node and edge
colors above that (hash collisions are possible there and documented).
"""

from __future__ import annotations

import hashlib
from itertools import permutations
from typing import Optional, Sequence

import numpy as np

from .graphs import NO_EDGE, Graph

BRUTE_FORCE_MAX_N = 8
WL_ROUNDS = 3


# ---------------------------------------------------------------------------
# validity
# ---------------------------------------------------------------------------


def _bond_orders(graph: Graph) -> np.ndarray:
    """Edge category index doubles as the bond order (0 = no edge)."""
    orders = graph.edge_types().astype(np.int64)
    np.fill_diagonal(orders, 0)
    return orders


def is_connected(graph: Graph) -> bool:
    orders = _bond_orders(graph)
    n = graph.n
    seen = np.zeros(n, dtype=bool)
    stack = [0]
    seen[0] = True
    while stack:
        i = stack.pop()
        for j in np.nonzero(orders[i] > 0)[0]:
            if not seen[j]:
                seen[j] = True
                stack.append(int(j))
    return bool(seen.all())


def is_valid(graph: Graph, table: dict[str, int]) -> bool:
    """Valid iff every node's bond-order-weighted degree stays within its
    valence and the graph is connected."""
    if graph.node_vocab is None:
        raise ValueError("validity needs a node vocabulary")
    orders = _bond_orders(graph)
    degrees = orders.sum(axis=1)
    for i, t in enumerate(graph.node_types()):
        name = graph.node_vocab[t]
        if name not in table or degrees[i] > table[name]:
            return False
    return is_connected(graph)


def validity(graphs: Sequence[Graph], table: dict[str, int]) -> float:
    if not graphs:
        return 0.0
    return sum(is_valid(g, table) for g in graphs) / len(graphs)


# ---------------------------------------------------------------------------
# isomorphism classes
# ---------------------------------------------------------------------------


def canonical_form(graph: Graph) -> bytes:
    """A label invariant under node relabeling.

    Up to BRUTE_FORCE_MAX_N nodes this is the lexicographic minimum over all
    permutations, i.e. exact; beyond that a WL-style refinement hash.
    """
    if graph.n <= BRUTE_FORCE_MAX_N:
        return _canonical_exhaustive(graph)
    return _wl_hash(graph)


def _canonical_exhaustive(graph: Graph) -> bytes:
    types = graph.node_types()
    edges = graph.edge_types()
    best = None
    for perm in permutations(range(graph.n)):
        p = np.asarray(perm)
        key = types[p].tobytes() + edges[np.ix_(p, p)].tobytes()
        if best is None or key < best:
            best = key
    return bytes([graph.n]) + best


def _wl_hash(graph: Graph) -> bytes:
    types = graph.node_types()
    edges = graph.edge_types()
    n = graph.n
    colors = [hashlib.sha256(bytes([int(t) % 256])).digest()[:8] for t in types]
    for _ in range(WL_ROUNDS):
        new = []
        for i in range(n):
            neigh = sorted(
                (int(edges[i, j]), colors[j]) for j in range(n) if edges[i, j] != NO_EDGE and j != i
            )
            h = hashlib.sha256()
            h.update(colors[i])
            for order, c in neigh:
                h.update(order.to_bytes(2, "big") + c)
            new.append(h.digest()[:8])
        colors = new
    h = hashlib.sha256()
    h.update(n.to_bytes(4, "big"))
    for c in sorted(colors):
        h.update(c)
    return h.digest()


def isomorphic(g1: Graph, g2: Graph) -> bool:
    """Exact permutation search; oracle-grade, meant for small n."""
    if g1.n != g2.n:
        return False
    t1, e1 = g1.node_types(), g1.edge_types()
    t2, e2 = g2.node_types(), g2.edge_types()
    for perm in permutations(range(g1.n)):
        p = np.asarray(perm)
        if np.array_equal(t1[p], t2) and np.array_equal(e1[np.ix_(p, p)], e2):
            return True
    return False


def uniqueness(graphs: Sequence[Graph]) -> float:
    if not graphs:
        return 0.0
    classes = {canonical_form(g) for g in graphs}
    return len(classes) / len(graphs)


def novelty(graphs: Sequence[Graph], train_set: Sequence[Graph]) -> float:
    """Fraction of generated isomorphism classes absent from the training
    set's classes."""
    if not graphs:
        return 0.0
    gen_classes = {canonical_form(g) for g in graphs}
    train_classes = {canonical_form(g) for g in train_set}
    return len(gen_classes - train_classes) / len(gen_classes)


# ---------------------------------------------------------------------------
# prediction metrics
# ---------------------------------------------------------------------------


def regression_metrics(preds, labels) -> dict[str, float]:
    p = np.asarray(preds, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if p.shape != y.shape:
        raise ValueError(f"preds and labels differ in length: {p.shape} vs {y.shape}")
    return {"mae": float(np.abs(p - y).mean()), "mse": float(((p - y) ** 2).mean())}


def classification_metrics(preds, labels, scores=None) -> dict[str, float]:
    """Accuracy over hard predictions; AUC over scores (rank-based, ties get
    half credit).  Scores default to the predictions for binary tasks."""
    p = np.asarray(preds).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if p.shape != y.shape:
        raise ValueError("preds and labels differ in length")
    out = {"accuracy": float((p == y).mean())}
    s = np.asarray(scores, dtype=np.float64).reshape(-1) if scores is not None \
        else p.astype(np.float64)
    pos = s[y == 1]
    neg = s[y == 0]
    if len(pos) and len(neg):
        wins = (pos.reshape(-1, 1) > neg.reshape(1, -1)).sum()
        ties = (pos.reshape(-1, 1) == neg.reshape(1, -1)).sum()
        out["auc"] = float((wins + 0.5 * ties) / (len(pos) * len(neg)))
    else:
        out["auc"] = float("nan")
    return out


# ---------------------------------------------------------------------------
# distributional proxy
# ---------------------------------------------------------------------------


def degree_histogram(graphs: Sequence[Graph], max_degree: Optional[int] = None) -> np.ndarray:
    degs = []
    for g in graphs:
        orders = _bond_orders(g)
        degs.extend((orders > 0).sum(axis=1).tolist())
    degs = np.asarray(degs, dtype=np.int64)
    hi = int(max_degree if max_degree is not None else (degs.max() if len(degs) else 0))
    hist = np.bincount(degs, minlength=hi + 1).astype(np.float64)
    return hist / hist.sum() if hist.sum() > 0 else hist


def degree_histogram_distance(gen: Sequence[Graph], ref: Sequence[Graph]) -> float:
    """Total-variation distance between normalized degree histograms; zero iff
    the histograms coincide."""
    hi = 0
    for gs in (gen, ref):
        for g in gs:
            hi = max(hi, int((_bond_orders(g) > 0).sum(axis=1).max()))
    hg = degree_histogram(gen, hi)
    hr = degree_histogram(ref, hi)
    return float(0.5 * np.abs(hg - hr).sum())
