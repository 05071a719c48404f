"""Dense graph data model with augmented edges.

Every ordered node pair carries an edge feature vector; "no edge" is itself a
reserved edge category (index 0), so a single ``n x n x d_e`` tensor holds both
structure and features.  Masked entries carry a reserved MASK category, which by
convention is the last index of the corresponding vocabulary.

All values are plain float64 numpy arrays and are treated as immutable;
operations return new graphs.  Generators are deterministic per seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

NO_EDGE = 0


class GraphFormatError(ValueError):
    """Raised when a graph record on disk cannot be parsed."""


def _as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


@dataclass(frozen=True)
class Graph:
    """A dense graph: node features X (n x d_v), augmented edge features
    A (n x n x d_e), and an optional graph attribute g (d_g, may be empty)."""

    X: np.ndarray
    A: np.ndarray
    g: np.ndarray = field(default_factory=lambda: np.zeros(0))
    node_vocab: Optional[tuple[str, ...]] = None
    edge_vocab: Optional[tuple[str, ...]] = None
    undirected: bool = True

    def __post_init__(self):
        object.__setattr__(self, "X", _as_f64(self.X))
        object.__setattr__(self, "A", _as_f64(self.A))
        object.__setattr__(self, "g", _as_f64(self.g))
        if self.node_vocab is not None:
            object.__setattr__(self, "node_vocab", tuple(self.node_vocab))
        if self.edge_vocab is not None:
            object.__setattr__(self, "edge_vocab", tuple(self.edge_vocab))
        n = self.X.shape[0]
        if n < 1 or self.X.ndim != 2:
            raise ValueError(f"X must be (n>=1, d_v), got {self.X.shape}")
        if self.A.shape[:2] != (n, n) or self.A.ndim != 3:
            raise ValueError(f"A must be (n, n, d_e) with n={n}, got {self.A.shape}")
        if self.g.ndim != 1:
            raise ValueError(f"g must be a vector, got shape {self.g.shape}")
        if self.node_vocab is not None and len(self.node_vocab) != self.X.shape[1]:
            raise ValueError("node_vocab length must equal d_v")
        if self.edge_vocab is not None and len(self.edge_vocab) != self.A.shape[2]:
            raise ValueError("edge_vocab length must equal d_e")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d_v(self) -> int:
        return self.X.shape[1]

    @property
    def d_e(self) -> int:
        return self.A.shape[2]

    @property
    def d_g(self) -> int:
        return self.g.shape[0]

    @property
    def node_mask_id(self) -> Optional[int]:
        return None if self.node_vocab is None else len(self.node_vocab) - 1

    @property
    def edge_mask_id(self) -> Optional[int]:
        return None if self.edge_vocab is None else len(self.edge_vocab) - 1

    def edge_types(self) -> np.ndarray:
        """Categorical view of A: argmax over the feature axis, (n, n) ints."""
        return np.argmax(self.A, axis=2).astype(np.int64)

    def node_types(self) -> np.ndarray:
        return np.argmax(self.X, axis=1).astype(np.int64)

    def num_edges(self) -> int:
        """Number of edges (unordered pairs for undirected graphs, i < j)."""
        et = self.edge_types()
        present = et != NO_EDGE
        np.fill_diagonal(present, False)
        if self.undirected:
            return int(np.triu(present, 1).sum())
        return int(present.sum())

    def equals(self, other: "Graph") -> bool:
        return (
            self.X.shape == other.X.shape
            and self.A.shape == other.A.shape
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.A, other.A)
            and np.array_equal(self.g, other.g)
            and self.node_vocab == other.node_vocab
            and self.edge_vocab == other.edge_vocab
        )


@dataclass(frozen=True)
class MaskedGraph:
    """A graph whose selected positions were replaced by the MASK token.

    ``base`` already holds the masked values; the boolean masks record which
    positions were replaced.  For categorical features the MASK token is the
    one-hot of the reserved last vocabulary index; real-valued masked entries
    are zeroed in graph space (the encoder substitutes a learned embedding).
    """

    base: Graph
    node_mask: np.ndarray
    edge_mask: np.ndarray
    graph_mask: bool

    def __post_init__(self):
        object.__setattr__(self, "node_mask", np.asarray(self.node_mask, dtype=bool))
        object.__setattr__(self, "edge_mask", np.asarray(self.edge_mask, dtype=bool))
        n = self.base.n
        if self.node_mask.shape != (n,) or self.edge_mask.shape != (n, n):
            raise ValueError("mask shapes must be (n,) and (n, n)")

    @property
    def n(self) -> int:
        return self.base.n


@dataclass(frozen=True)
class GraphBatch:
    """Graphs padded to a common size; padded positions never contribute to
    losses, attention weights, or readouts."""

    X: np.ndarray  # (B, n_max, d_v)
    A: np.ndarray  # (B, n_max, n_max, d_e)
    g: np.ndarray  # (B, d_g)
    node_pad_mask: np.ndarray  # (B, n_max) bool, True on real nodes
    sizes: tuple[int, ...]
    node_vocab: Optional[tuple[str, ...]] = None
    edge_vocab: Optional[tuple[str, ...]] = None
    undirected: bool = True

    @property
    def B(self) -> int:
        return self.X.shape[0]

    @property
    def n_max(self) -> int:
        return self.X.shape[1]


@dataclass(frozen=True)
class DatasetSpec:
    """Declarative description of a synthetic dataset or a graph file."""

    kind: str  # toy-molecule | sbm | er | regression-synthetic | file
    size: int = 0
    seed: int = 0
    params: dict = field(default_factory=dict)

    _KINDS = ("toy-molecule", "sbm", "er", "regression-synthetic", "file")

    def __post_init__(self):
        if self.kind not in self._KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}")


# ---------------------------------------------------------------------------
# permutation and masking
# ---------------------------------------------------------------------------


def _check_perm(perm: Sequence[int], n: int) -> np.ndarray:
    p = np.asarray(perm, dtype=np.int64)
    if p.shape != (n,) or not np.array_equal(np.sort(p), np.arange(n)):
        raise ValueError(f"perm must be a bijection of [0, {n}), got {perm!r}")
    return p


def permute(graph: Graph, perm: Sequence[int]) -> Graph:
    """Relabel nodes: X'[i] = X[perm[i]], A'[i, j] = A[perm[i], perm[j]]."""
    p = _check_perm(perm, graph.n)
    return replace(graph, X=graph.X[p], A=graph.A[np.ix_(p, p)])


def compose_perms(p: Sequence[int], q: Sequence[int]) -> np.ndarray:
    """(p o q)[i] = p[q[i]]; permute(permute(G, p), q) == permute(G, p o q)."""
    p = np.asarray(p, dtype=np.int64)
    q = np.asarray(q, dtype=np.int64)
    return p[q]


def invert_perm(p: Sequence[int]) -> np.ndarray:
    p = np.asarray(p, dtype=np.int64)
    inv = np.empty_like(p)
    inv[p] = np.arange(len(p))
    return inv


def _one_hot(idx: int, dim: int) -> np.ndarray:
    v = np.zeros(dim)
    v[idx] = 1.0
    return v


def mask_graph(
    graph: Graph,
    nodes: Iterable[int] = (),
    edges: Iterable[tuple[int, int]] = (),
    graph_attr: bool = False,
) -> MaskedGraph:
    """Replace the selected positions with the MASK token.

    For undirected graphs masking (i, j) also masks (j, i), preserving the
    symmetry invariant.  An empty selection is a valid no-op.
    """
    n = graph.n
    node_mask = np.zeros(n, dtype=bool)
    edge_mask = np.zeros((n, n), dtype=bool)
    for i in nodes:
        if not 0 <= i < n:
            raise ValueError(f"node index {i} out of bounds for n={n}")
        node_mask[i] = True
    for i, j in edges:
        if not (0 <= i < n and 0 <= j < n):
            raise ValueError(f"edge index ({i}, {j}) out of bounds for n={n}")
        edge_mask[i, j] = True
        if graph.undirected:
            edge_mask[j, i] = True

    X = graph.X.copy()
    A = graph.A.copy()
    g = graph.g.copy()
    if node_mask.any():
        if graph.node_mask_id is not None:
            X[node_mask] = _one_hot(graph.node_mask_id, graph.d_v)
        else:
            X[node_mask] = 0.0
    if edge_mask.any():
        if graph.edge_mask_id is not None:
            A[edge_mask] = _one_hot(graph.edge_mask_id, graph.d_e)
        else:
            A[edge_mask] = 0.0
    if graph_attr:
        g[:] = 0.0

    return MaskedGraph(
        base=replace(graph, X=X, A=A, g=g),
        node_mask=node_mask,
        edge_mask=edge_mask,
        graph_mask=bool(graph_attr),
    )


def unmask(masked: MaskedGraph, original: Graph) -> Graph:
    """Substitute the original values back into the masked positions."""
    X = masked.base.X.copy()
    A = masked.base.A.copy()
    g = masked.base.g.copy()
    X[masked.node_mask] = original.X[masked.node_mask]
    A[masked.edge_mask] = original.A[masked.edge_mask]
    if masked.graph_mask:
        g = original.g.copy()
    return replace(masked.base, X=X, A=A, g=g)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def batch(graphs: Sequence[Graph]) -> GraphBatch:
    if not graphs:
        raise ValueError("cannot batch an empty list of graphs")
    g0 = graphs[0]
    for g in graphs[1:]:
        if g.d_v != g0.d_v or g.d_e != g0.d_e or g.d_g != g0.d_g:
            raise ValueError("all graphs in a batch must share feature dims")
    n_max = max(g.n for g in graphs)
    B = len(graphs)
    X = np.zeros((B, n_max, g0.d_v))
    A = np.zeros((B, n_max, n_max, g0.d_e))
    gg = np.zeros((B, g0.d_g))
    pad = np.zeros((B, n_max), dtype=bool)
    for b, g in enumerate(graphs):
        X[b, : g.n] = g.X
        A[b, : g.n, : g.n] = g.A
        gg[b] = g.g
        pad[b, : g.n] = True
    return GraphBatch(
        X=X,
        A=A,
        g=gg,
        node_pad_mask=pad,
        sizes=tuple(g.n for g in graphs),
        node_vocab=g0.node_vocab,
        edge_vocab=g0.edge_vocab,
        undirected=g0.undirected,
    )


def unbatch(gb: GraphBatch) -> list[Graph]:
    out = []
    for b, n in enumerate(gb.sizes):
        out.append(
            Graph(
                X=gb.X[b, :n].copy(),
                A=gb.A[b, :n, :n].copy(),
                g=gb.g[b].copy(),
                node_vocab=gb.node_vocab,
                edge_vocab=gb.edge_vocab,
                undirected=gb.undirected,
            )
        )
    return out


# ---------------------------------------------------------------------------
# synthetic generators
# ---------------------------------------------------------------------------

TOY_VALENCE = {"C": 4, "O": 2, "H": 1}
TOY_NODE_VOCAB = ("C", "O", "H", "MASK")
TOY_EDGE_VOCAB = ("NONE", "SINGLE", "DOUBLE", "TRIPLE", "MASK")
PLAIN_EDGE_VOCAB = ("NONE", "EDGE", "MASK")


def _categorical_graph(types, a_types, node_vocab, edge_vocab, g=()):
    n = len(types)
    X = np.zeros((n, len(node_vocab)))
    X[np.arange(n), types] = 1.0
    A = np.zeros((n, n, len(edge_vocab)))
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    A[ii, jj, a_types] = 1.0
    return Graph(X=X, A=A, g=np.asarray(g, dtype=np.float64),
                 node_vocab=node_vocab, edge_vocab=edge_vocab)


def generate_toy_molecules(spec: DatasetSpec) -> list[Graph]:
    """Molecule-like graphs valid by construction: bond-order weighted degree
    never exceeds the valence table and every graph is connected."""
    if spec.kind != "toy-molecule":
        raise ValueError("spec.kind must be 'toy-molecule'")
    valence = dict(spec.params.get("valence", TOY_VALENCE))
    symbols = tuple(valence)
    node_vocab = symbols + ("MASK",)
    n_lo, n_hi = spec.params.get("n_range", (4, 8))
    ring_prob = float(spec.params.get("ring_prob", 0.3))
    rng = np.random.default_rng(spec.seed)
    graphs = []
    while len(graphs) < spec.size:
        n = int(rng.integers(n_lo, n_hi + 1))
        types = [int(rng.integers(0, len(symbols)))]
        remaining = [valence[symbols[types[0]]]]
        a_types = np.zeros((n, n), dtype=np.int64)
        ok = True
        for i in range(1, n):
            anchors = [j for j in range(i) if remaining[j] >= 1]
            if not anchors:
                ok = False
                break
            j = int(anchors[rng.integers(0, len(anchors))])
            t = int(rng.integers(0, len(symbols)))
            cap = min(remaining[j], valence[symbols[t]], 3)
            order = 1 if cap == 1 or rng.random() < 0.7 else int(rng.integers(2, cap + 1))
            types.append(t)
            remaining.append(valence[symbols[t]] - order)
            remaining[j] -= order
            a_types[i, j] = a_types[j, i] = order
        if not ok:
            continue
        # occasional ring closures while valence allows
        for i in range(n):
            for j in range(i + 1, n):
                if a_types[i, j] == 0 and remaining[i] >= 1 and remaining[j] >= 1:
                    if rng.random() < ring_prob:
                        a_types[i, j] = a_types[j, i] = 1
                        remaining[i] -= 1
                        remaining[j] -= 1
        graphs.append(_categorical_graph(types, a_types, node_vocab, TOY_EDGE_VOCAB))
    return graphs


def generate_er(spec: DatasetSpec) -> list[Graph]:
    if spec.kind != "er":
        raise ValueError("spec.kind must be 'er'")
    p = float(spec.params.get("p", 0.3))
    n_lo, n_hi = spec.params.get("n_range", (4, 8))
    n_types = int(spec.params.get("node_types", 2))
    node_vocab = tuple(f"T{i}" for i in range(n_types)) + ("MASK",)
    rng = np.random.default_rng(spec.seed)
    graphs = []
    for _ in range(spec.size):
        n = int(rng.integers(n_lo, n_hi + 1))
        types = rng.integers(0, n_types, size=n)
        upper = rng.random((n, n)) < p
        a_types = np.zeros((n, n), dtype=np.int64)
        iu = np.triu_indices(n, 1)
        a_types[iu] = upper[iu].astype(np.int64)
        a_types = a_types + a_types.T
        graphs.append(_categorical_graph(types, a_types, node_vocab, PLAIN_EDGE_VOCAB))
    return graphs


def generate_sbm(spec: DatasetSpec) -> list[Graph]:
    if spec.kind != "sbm":
        raise ValueError("spec.kind must be 'sbm'")
    block_sizes = tuple(spec.params.get("block_sizes", (4, 4)))
    p_in = float(spec.params.get("p_in", 0.8))
    p_out = float(spec.params.get("p_out", 0.1))
    node_vocab = tuple(f"B{i}" for i in range(len(block_sizes))) + ("MASK",)
    rng = np.random.default_rng(spec.seed)
    blocks = np.repeat(np.arange(len(block_sizes)), block_sizes)
    n = len(blocks)
    graphs = []
    for _ in range(spec.size):
        a_types = np.zeros((n, n), dtype=np.int64)
        for i in range(n):
            for j in range(i + 1, n):
                p = p_in if blocks[i] == blocks[j] else p_out
                if rng.random() < p:
                    a_types[i, j] = a_types[j, i] = 1
        graphs.append(_categorical_graph(blocks, a_types, node_vocab, PLAIN_EDGE_VOCAB))
    return graphs


def regression_label(graph: Graph) -> float:
    """The declared synthetic label: sum of node feature channel 0 over all
    nodes, plus 0.1 times the edge count."""
    return float(graph.X[:, 0].sum() + 0.1 * graph.num_edges())


def generate_regression_set(spec: DatasetSpec) -> list[tuple[Graph, float]]:
    """Graphs with real-valued node features and a deterministic scalar label,
    stored in g so the label can be masked for prediction-as-inpainting."""
    if spec.kind != "regression-synthetic":
        raise ValueError("spec.kind must be 'regression-synthetic'")
    n_lo, n_hi = spec.params.get("n_range", (4, 10))
    p = float(spec.params.get("p", 0.4))
    d_v = int(spec.params.get("node_channels", 2))
    rng = np.random.default_rng(spec.seed)
    out = []
    for _ in range(spec.size):
        n = int(rng.integers(n_lo, n_hi + 1))
        X = rng.uniform(0.0, 2.0, size=(n, d_v))
        a_types = np.zeros((n, n), dtype=np.int64)
        for i in range(n):
            for j in range(i + 1, n):
                if rng.random() < p:
                    a_types[i, j] = a_types[j, i] = 1
        A = np.zeros((n, n, len(PLAIN_EDGE_VOCAB)))
        ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        A[ii, jj, a_types] = 1.0
        g = Graph(X=X, A=A, edge_vocab=PLAIN_EDGE_VOCAB)
        y = regression_label(g)
        out.append((replace(g, g=np.array([y])), y))
    return out


def generate(spec: DatasetSpec):
    """Dispatch on spec.kind; 'file' specs load via read_graphs."""
    if spec.kind == "toy-molecule":
        return generate_toy_molecules(spec)
    if spec.kind == "er":
        return generate_er(spec)
    if spec.kind == "sbm":
        return generate_sbm(spec)
    if spec.kind == "regression-synthetic":
        return generate_regression_set(spec)
    if spec.kind == "file":
        return read_graphs(spec.params["path"])
    raise ValueError(spec.kind)


# ---------------------------------------------------------------------------
# file I/O: JSON lines, one graph per line
# ---------------------------------------------------------------------------


def _graph_to_record(graph: Graph) -> dict:
    a_types = graph.edge_types()
    rec = {
        "n": graph.n,
        "x": graph.X.tolist(),
        "a_type": a_types.tolist(),
        "g": graph.g.tolist(),
    }
    one_hot = np.zeros_like(graph.A)
    ii, jj = np.meshgrid(np.arange(graph.n), np.arange(graph.n), indexing="ij")
    one_hot[ii, jj, a_types] = 1.0
    if not np.array_equal(one_hot, graph.A):
        rec["a_feat"] = graph.A.tolist()
    if graph.node_vocab is not None:
        rec["node_vocab"] = list(graph.node_vocab)
    if graph.edge_vocab is not None:
        rec["edge_vocab"] = list(graph.edge_vocab)
    return rec


def _graph_from_record(rec: dict) -> Graph:
    n = int(rec["n"])
    X = _as_f64(rec["x"])
    edge_vocab = tuple(rec["edge_vocab"]) if "edge_vocab" in rec else None
    node_vocab = tuple(rec["node_vocab"]) if "node_vocab" in rec else None
    if "a_feat" in rec:
        A = _as_f64(rec["a_feat"])
    else:
        a_types = np.asarray(rec["a_type"], dtype=np.int64)
        d_e = len(edge_vocab) if edge_vocab is not None else int(a_types.max()) + 1
        A = np.zeros((n, n, d_e))
        ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        A[ii, jj, a_types] = 1.0
    undirected = bool(np.array_equal(A, np.swapaxes(A, 0, 1)))
    return Graph(X=X, A=A, g=_as_f64(rec.get("g", [])),
                 node_vocab=node_vocab, edge_vocab=edge_vocab,
                 undirected=undirected)


def write_graphs(graphs: Sequence[Graph], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for g in graphs:
            f.write(json.dumps(_graph_to_record(g)) + "\n")


def read_graphs(path) -> list[Graph]:
    graphs = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                graphs.append(_graph_from_record(rec))
            except (ValueError, KeyError, TypeError) as e:
                raise GraphFormatError(f"{path}: malformed graph record on line {lineno}: {e}") from e
    return graphs
