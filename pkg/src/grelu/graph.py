"""Graphs with node features and labels, their on-disk format, and splits.

A dataset directory holds four files::

    edges.tsv      u<TAB>v per line, 0-based node ids, no header
    features.tsv   N lines of C tab-separated reals
    labels.tsv     N lines, one integer each
    meta.json      {"num_classes": int, "name": str (optional)}
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .autodiff import SparseMatrix, Tensor


class GraphFormatError(ValueError):
    """A dataset file is missing or malformed."""

    def __init__(self, path, line: int | None, message: str):
        where = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{where}: {message}")
        self.path = Path(path)
        self.line = line


class SplitError(ValueError):
    """The requested split cannot be drawn from the graph."""


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected graph; the adjacency is binary, symmetric and loop-free."""

    adjacency: SparseMatrix
    features: Tensor
    labels: np.ndarray
    num_classes: int
    name: str = ""

    def __post_init__(self):
        n = self.adjacency.rows
        if self.adjacency.cols != n:
            raise ValueError("adjacency must be square")
        if self.features.rows != n:
            raise ValueError(f"features have {self.features.rows} rows for {n} nodes")
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.shape != (n,):
            raise ValueError(f"labels must have length {n}")
        if n and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.adjacency.rows

    @property
    def num_edges(self) -> int:
        """Undirected edge count."""
        return self.adjacency.nnz // 2

    @classmethod
    def from_edges(cls, n: int, edges, features, labels, num_classes: int, name: str = "") -> "Graph":
        """Symmetrize, deduplicate and strip self-loops from an edge list."""
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        e = e[e[:, 0] != e[:, 1]]
        r = np.concatenate([e[:, 0], e[:, 1]])
        c = np.concatenate([e[:, 1], e[:, 0]])
        pairs = np.unique(np.stack([r, c], axis=1), axis=0) if len(r) else np.empty((0, 2), np.int64)
        adj = SparseMatrix.from_coo(n, n, pairs[:, 0], pairs[:, 1])
        feats = features if isinstance(features, Tensor) else Tensor(np.asarray(features, dtype=np.float64).reshape(n, -1))
        return cls(adj, feats, np.asarray(labels), num_classes, name)

    def edge_list(self) -> np.ndarray:
        """Each undirected edge once, as (u, v) with u < v, sorted."""
        rows = np.repeat(np.arange(self.n), np.diff(self.adjacency.row_offsets))
        cols = self.adjacency.col_indices
        keep = rows < cols
        return np.stack([rows[keep], cols[keep]], axis=1)

    def permuted(self, perm) -> "Graph":
        """Relabel nodes so that old node ``perm[i]`` becomes node ``i``."""
        perm = np.asarray(perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        e = inv[self.edge_list()]
        return Graph.from_edges(self.n, e, self.features.data[perm], self.labels[perm],
                                self.num_classes, self.name)


@dataclass(frozen=True)
class DataSplit:
    train: np.ndarray
    test: np.ndarray
    seed: int

    def __post_init__(self):
        if np.intersect1d(self.train, self.test).size:
            raise SplitError("train and test sets overlap")


# ---------------------------------------------------------------------------
# I/O


def _read_lines(path: Path) -> list[str]:
    if not path.is_file():
        raise GraphFormatError(path, None, "missing file")
    text = path.read_text()
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return lines


def load_graph(directory) -> Graph:
    directory = Path(directory)
    if not directory.is_dir():
        raise GraphFormatError(directory, None, "dataset directory does not exist")
    meta_path = directory / "meta.json"
    if not meta_path.is_file():
        raise GraphFormatError(meta_path, None, "missing file")
    try:
        meta = json.loads(meta_path.read_text())
        num_classes = int(meta["num_classes"])
    except (ValueError, KeyError, TypeError) as exc:
        raise GraphFormatError(meta_path, None, f"bad meta.json ({exc})") from None
    name = str(meta.get("name", ""))

    feat_path = directory / "features.tsv"
    rows = []
    width = None
    for i, line in enumerate(_read_lines(feat_path), start=1):
        parts = line.split("\t")
        if width is None:
            width = len(parts)
        elif len(parts) != width:
            raise GraphFormatError(feat_path, i, f"ragged row: {len(parts)} values, expected {width}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            raise GraphFormatError(feat_path, i, "non-numeric feature value") from None
    n = len(rows)
    features = np.array(rows, dtype=np.float64).reshape(n, width or 0)

    label_path = directory / "labels.tsv"
    labels = []
    for i, line in enumerate(_read_lines(label_path), start=1):
        try:
            y = int(line)
        except ValueError:
            raise GraphFormatError(label_path, i, "label is not an integer") from None
        if not 0 <= y < num_classes:
            raise GraphFormatError(label_path, i, f"label {y} outside [0, {num_classes})")
        labels.append(y)
    if len(labels) != n:
        raise GraphFormatError(label_path, None, f"{len(labels)} labels for {n} feature rows")

    edge_path = directory / "edges.tsv"
    edges = []
    for i, line in enumerate(_read_lines(edge_path), start=1):
        parts = line.split("\t")
        if len(parts) != 2:
            raise GraphFormatError(edge_path, i, "expected two tab-separated node ids")
        try:
            u, v = int(parts[0]), int(parts[1])
        except ValueError:
            raise GraphFormatError(edge_path, i, "node id is not an integer") from None
        if not (0 <= u < n and 0 <= v < n):
            raise GraphFormatError(edge_path, i, f"edge ({u}, {v}) references a node >= {n}")
        edges.append((u, v))
    return Graph.from_edges(n, edges, features, labels, num_classes, name)


def save_graph(g: Graph, directory) -> Path:
    """Write ``g`` in the dataset directory format (byte-stable for a given graph)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    edges = "".join(f"{u}\t{v}\n" for u, v in g.edge_list())
    (directory / "edges.tsv").write_text(edges)
    feats = "".join("\t".join(repr(float(v)) for v in row) + "\n" for row in g.features.data)
    (directory / "features.tsv").write_text(feats)
    (directory / "labels.tsv").write_text("".join(f"{int(y)}\n" for y in g.labels))
    meta = {"num_classes": g.num_classes}
    if g.name:
        meta["name"] = g.name
    (directory / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    return directory


# ---------------------------------------------------------------------------
# normalization and splits


def sym_normalize(g: Graph, add_self_loops: bool) -> SparseMatrix:
    """``D^-1/2 (A [+ I]) D^-1/2``; zero-degree nodes get a zero scaling."""
    a = g.adjacency.to_scipy()
    if add_self_loops:
        a = (a + sp.identity(g.n, format="csr")).tocsr()
    deg = np.asarray(a.sum(axis=1)).ravel()
    with np.errstate(divide="ignore"):
        d = np.where(deg > 0, 1.0 / np.sqrt(deg), 0.0)
    coo = a.tocoo()
    vals = d[coo.row] * coo.data * d[coo.col]
    return SparseMatrix.from_coo(g.n, g.n, coo.row, coo.col, vals)


def random_split(g: Graph, seed: int, per_class: int = 20, test_size: int = 1000) -> DataSplit:
    """``per_class`` training nodes from every class, then ``test_size`` test nodes."""
    rng = np.random.default_rng(seed)
    train = []
    for c in range(g.num_classes):
        members = np.flatnonzero(g.labels == c)
        if len(members) < per_class:
            raise SplitError(f"class {c} has {len(members)} nodes, fewer than per_class={per_class}")
        train.append(rng.choice(members, size=per_class, replace=False))
    train = np.sort(np.concatenate(train))
    pool = np.setdiff1d(np.arange(g.n), train)
    if len(pool) < test_size:
        raise SplitError(f"only {len(pool)} nodes left for a test set of {test_size}")
    test = np.sort(rng.choice(pool, size=test_size, replace=False))
    return DataSplit(train, test, seed)


# ---------------------------------------------------------------------------
# generators


def synthetic_sbm(blocks: int, nodes_per_block: int, p_in: float, p_out: float,
                  feat_dim: int, seed: int, noise: float = 1.0) -> Graph:
    """Stochastic block model with Gaussian features around per-block unit vectors."""
    if not 0.0 <= p_out <= p_in <= 1.0:
        raise ValueError("need 0 <= p_out <= p_in <= 1")
    if feat_dim < blocks:
        raise ValueError("feat_dim must be at least the number of blocks for distinct unit means")
    rng = np.random.default_rng(seed)
    n = blocks * nodes_per_block
    labels = np.repeat(np.arange(blocks), nodes_per_block)
    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(labels[iu] == labels[ju], p_in, p_out)
    hit = rng.random(len(iu)) < prob
    edges = np.stack([iu[hit], ju[hit]], axis=1)
    means = np.eye(feat_dim)[:blocks]
    features = means[labels] + noise * rng.standard_normal((n, feat_dim))
    return Graph.from_edges(n, edges, features, labels, blocks, name="sbm")


def karate_club() -> Graph:
    """Zachary's karate club: identity features, the two-club split as labels."""
    import networkx as nx

    kc = nx.karate_club_graph()
    n = kc.number_of_nodes()
    labels = np.array([0 if kc.nodes[i]["club"] == "Mr. Hi" else 1 for i in range(n)])
    return Graph.from_edges(n, list(kc.edges()), np.eye(n), labels, 2, name="karate")
