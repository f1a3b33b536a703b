"""Labeled graphs, TU-format ingestion, SGC propagation and the SortPool baseline."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

# known benchmark shapes, checked after parsing: (graphs, node label kinds, classes)
KNOWN_DATASETS = {"MUTAG": (188, 7, 2)}


class DatasetError(ValueError):
    """Malformed TU dataset; the message names the file and line when known."""


@dataclass(frozen=True)
class LabeledGraph:
    """Undirected graph with categorical node labels and a class label.

    ``edges`` holds each undirected edge once as ``(i, j)`` with ``i < j``.
    Self-loops are not stored; propagation adds them.
    """

    num_nodes: int
    edges: Tuple[Tuple[int, int], ...]
    node_labels: np.ndarray
    class_label: int

    def __post_init__(self):
        if self.num_nodes < 1:
            raise ValueError("a graph needs at least one node")
        labels = np.array(self.node_labels, dtype=np.int64)
        if labels.shape != (self.num_nodes,):
            raise ValueError(f"node_labels has shape {labels.shape}, expected ({self.num_nodes},)")
        edges = set()
        for i, j in self.edges:
            i, j = int(i), int(j)
            if not (0 <= i < self.num_nodes and 0 <= j < self.num_nodes):
                raise ValueError(f"edge ({i}, {j}) out of range for {self.num_nodes} nodes")
            if i == j:
                raise ValueError(f"self-loop at node {i}")
            edges.add((min(i, j), max(i, j)))
        labels.setflags(write=False)
        object.__setattr__(self, "edges", tuple(sorted(edges)))
        object.__setattr__(self, "node_labels", labels)
        object.__setattr__(self, "class_label", int(self.class_label))

    def adjacency(self) -> np.ndarray:
        A = np.zeros((self.num_nodes, self.num_nodes))
        if self.edges:
            idx = np.asarray(self.edges)
            A[idx[:, 0], idx[:, 1]] = 1.0
            A[idx[:, 1], idx[:, 0]] = 1.0
        return A

    def permuted(self, perm) -> "LabeledGraph":
        """Relabel nodes so that new node ``k`` is old node ``perm[k]``."""
        perm = np.asarray(perm)
        if sorted(perm.tolist()) != list(range(self.num_nodes)):
            raise ValueError("perm must be a permutation of the node indices")
        inv = np.empty_like(perm)
        inv[perm] = np.arange(self.num_nodes)
        edges = tuple((int(inv[i]), int(inv[j])) for i, j in self.edges)
        return LabeledGraph(self.num_nodes, edges, self.node_labels[perm], self.class_label)


@dataclass(frozen=True)
class GraphDataset:
    graphs: Tuple[LabeledGraph, ...]
    num_node_label_kinds: int
    num_classes: int
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "graphs", tuple(self.graphs))
        for k, g in enumerate(self.graphs):
            if g.node_labels.size and (g.node_labels.min() < 0 or g.node_labels.max() >= self.num_node_label_kinds):
                raise ValueError(f"graph {k}: node label outside [0, {self.num_node_label_kinds})")
            if not 0 <= g.class_label < self.num_classes:
                raise ValueError(f"graph {k}: class label outside [0, {self.num_classes})")
        expected = KNOWN_DATASETS.get(self.name)
        if expected is not None:
            got = (len(self.graphs), self.num_node_label_kinds, self.num_classes)
            if got != expected:
                raise ValueError(f"{self.name}: expected (graphs, kinds, classes) = {expected}, got {got}")

    def __len__(self):
        return len(self.graphs)

    @property
    def labels(self) -> np.ndarray:
        return np.array([g.class_label for g in self.graphs], dtype=np.int64)


def _read_ints(path: Path, per_line: int) -> List[Tuple[int, ...]]:
    if not path.is_file():
        raise DatasetError(f"missing file {path}")
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            tokens = [t.strip() for t in text.split(",")] if per_line > 1 else [text]
            if len(tokens) != per_line:
                raise DatasetError(f"{path.name}:{lineno}: expected {per_line} value(s), got {text!r}")
            try:
                rows.append((lineno,) + tuple(int(t) for t in tokens))
            except ValueError:
                raise DatasetError(f"{path.name}:{lineno}: non-integer token in {text!r}") from None
    return rows


def _find_name(directory: Path) -> str:
    hits = sorted(p.name[: -len("_A.txt")] for p in directory.glob("*_A.txt"))
    if not hits:
        raise DatasetError(f"no *_A.txt edge file in {directory}")
    if len(hits) > 1:
        raise DatasetError(f"several datasets in {directory}: {hits}")
    return hits[0]


def parse_tu_dataset(directory, name: str = None) -> GraphDataset:
    """Read a dataset in the TU benchmark layout.

    Expects ``DS_A.txt`` (1-based ``i, j`` edge list), ``DS_graph_indicator.txt``,
    ``DS_graph_labels.txt`` and ``DS_node_labels.txt``. Graph and node labels
    are remapped to dense ranges in sorted order; edges become undirected pairs.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetError(f"dataset directory {directory} does not exist")
    name = name or _find_name(directory)

    def path(suffix):
        return directory / f"{name}_{suffix}.txt"

    files = {s: path(s) for s in ("A", "graph_indicator", "graph_labels", "node_labels")}
    for p in files.values():
        if not p.is_file():
            raise DatasetError(f"missing file {p}")

    graph_rows = _read_ints(files["graph_labels"], 1)
    n_graphs = len(graph_rows)
    indicator_rows = _read_ints(files["graph_indicator"], 1)
    n_nodes = len(indicator_rows)
    node_rows = _read_ints(files["node_labels"], 1)
    edge_rows = _read_ints(files["A"], 2)

    graph_of = np.empty(n_nodes, dtype=np.int64)
    for node, (lineno, gid) in enumerate(indicator_rows):
        if not 1 <= gid <= n_graphs:
            raise DatasetError(
                f"{files['graph_indicator'].name}:{lineno}: graph index {gid} out of range 1..{n_graphs}"
            )
        graph_of[node] = gid - 1
    if len(node_rows) != n_nodes:
        raise DatasetError(
            f"{files['node_labels'].name}: {len(node_rows)} labels for {n_nodes} nodes in the graph indicator"
        )

    members = [[] for _ in range(n_graphs)]
    for node, gid in enumerate(graph_of):
        members[gid].append(node)
    for gid, nodes in enumerate(members):
        if not nodes:
            raise DatasetError(f"{files['graph_labels'].name}:{graph_rows[gid][0]}: graph {gid + 1} has no nodes")
    local = np.empty(n_nodes, dtype=np.int64)
    for nodes in members:
        local[nodes] = np.arange(len(nodes))

    edges = [set() for _ in range(n_graphs)]
    for lineno, i, j in edge_rows:
        for v in (i, j):
            if v < 1:
                raise DatasetError(f"{files['A'].name}:{lineno}: node index {v} out of range")
            if v > n_nodes:
                raise DatasetError(f"{files['A'].name}:{lineno}: dangling node {v} has no graph assignment")
        i, j = i - 1, j - 1
        if graph_of[i] != graph_of[j]:
            raise DatasetError(f"{files['A'].name}:{lineno}: edge ({i + 1}, {j + 1}) joins two graphs")
        if i == j:
            continue
        a, b = local[i], local[j]
        edges[graph_of[i]].add((min(a, b), max(a, b)))

    raw_node = np.array([r[1] for r in node_rows], dtype=np.int64)
    node_values, node_dense = np.unique(raw_node, return_inverse=True)
    raw_graph = np.array([r[1] for r in graph_rows], dtype=np.int64)
    class_values, class_dense = np.unique(raw_graph, return_inverse=True)

    graphs = [
        LabeledGraph(len(nodes), tuple(sorted(edges[gid])), node_dense[nodes], int(class_dense[gid]))
        for gid, nodes in enumerate(members)
    ]
    try:
        return GraphDataset(graphs, len(node_values), len(class_values), name)
    except ValueError as exc:
        raise DatasetError(str(exc)) from None


def write_tu_dataset(ds: GraphDataset, directory, name: str = None) -> Path:
    """Write ``ds`` in the TU layout (labels as stored, edges in both directions)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    name = name or ds.name or "DS"
    a_lines, ind_lines, node_lines, graph_lines = [], [], [], []
    offset = 0
    for gid, g in enumerate(ds.graphs, start=1):
        for i, j in g.edges:
            a_lines.append(f"{i + offset + 1}, {j + offset + 1}")
            a_lines.append(f"{j + offset + 1}, {i + offset + 1}")
        ind_lines.extend([str(gid)] * g.num_nodes)
        node_lines.extend(str(int(v)) for v in g.node_labels)
        graph_lines.append(str(g.class_label))
        offset += g.num_nodes
    for suffix, lines in (("A", a_lines), ("graph_indicator", ind_lines),
                          ("node_labels", node_lines), ("graph_labels", graph_lines)):
        with open(directory / f"{name}_{suffix}.txt", "w", encoding="utf-8") as fh:
            fh.write("".join(line + "\n" for line in lines))
    return directory


def find_dataset_dir(candidates: Sequence = ()) -> Path:
    """First existing directory among ``candidates`` and ``$FLOWPOOL_MUTAG_DIR``, or None."""
    env = os.environ.get("FLOWPOOL_MUTAG_DIR")
    for c in list(candidates) + ([env] if env else []):
        if c and Path(c).is_dir():
            return Path(c)
    return None


def one_hot_features(g: LabeledGraph, kinds: int) -> np.ndarray:
    labels = g.node_labels
    if labels.size and (labels.min() < 0 or labels.max() >= kinds):
        raise ValueError(f"node label outside [0, {kinds})")
    F = np.zeros((g.num_nodes, kinds))
    F[np.arange(g.num_nodes), labels] = 1.0
    return F


def normalized_adjacency(g: LabeledGraph) -> np.ndarray:
    """``D^{-1/2} (A + I) D^{-1/2}`` with ``D`` the degree matrix of ``A + I``."""
    A = g.adjacency() + np.eye(g.num_nodes)
    s = 1.0 / np.sqrt(A.sum(axis=1))
    return s[:, None] * A * s[None, :]


def sgc_propagate(g: LabeledGraph, F, K: int = 2) -> np.ndarray:
    """``S^K F`` for the self-looped, symmetrically normalized adjacency ``S``."""
    F = np.asarray(F, dtype=np.float64)
    if K < 0:
        raise ValueError("K must be >= 0")
    if F.ndim != 2 or F.shape[0] != g.num_nodes:
        raise ValueError(f"feature matrix has shape {F.shape}, expected ({g.num_nodes}, d)")
    S = normalized_adjacency(g)
    out = F
    for _ in range(K):
        out = S @ out
    return out


def sortpool_order(Y, K: int) -> np.ndarray:
    """Indices of the kept rows: descending in the last column, ties by index."""
    Y = np.asarray(Y, dtype=np.float64)
    # a stable sort of the negated key keeps the lower index first among ties
    return np.argsort(-Y[:, -1], kind="stable")[:K]


def sortpool_baseline(Y, K: int) -> np.ndarray:
    """Keep the ``K`` rows with the largest last channel, zero-padded to ``K`` rows."""
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim != 2 or Y.shape[1] < 1:
        raise ValueError("Y must be an (N, d) matrix with d >= 1")
    if K < 1:
        raise ValueError("K must be >= 1")
    out = np.zeros((K, Y.shape[1]))
    order = sortpool_order(Y, K)
    out[: order.size] = Y[order]
    return out
