import json
import logging
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp

from graph_moe.rng import RngState

logger = logging.getLogger(__name__)

FEATURES_MAGIC = b"GMXF"
FEATURES_HEADER = struct.Struct("<4sIII")
DEFAULT_SPLIT_RATIOS = (0.48, 0.32, 0.20)
REQUIRED_FILES = ["meta.json", "edges.tsv", "features.bin", "labels.tsv"]


class DatasetException(Exception):
    pass


class DatasetFormatError(DatasetException):
    pass


class DatasetShapeError(DatasetException):
    pass


class SplitError(DatasetException):
    pass


def canonical_adjacency(num_nodes: int, sources: np.ndarray, targets: np.ndarray) -> sp.csr_matrix:
    """Symmetric 0/1 CSR adjacency with self-loops and duplicates removed, column indices sorted per row."""
    sources = np.asarray(sources, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64)
    keep = sources != targets
    sources, targets = sources[keep], targets[keep]
    rows = np.concatenate([sources, targets])
    cols = np.concatenate([targets, sources])
    adjacency = sp.coo_matrix((np.ones(rows.size), (rows, cols)), shape=(num_nodes, num_nodes)).tocsr()
    adjacency.sum_duplicates()
    adjacency.data[:] = 1.0
    adjacency.sort_indices()
    return adjacency


@dataclass(eq=False)
class GraphDataset:
    name: str
    num_nodes: int
    num_features: int
    num_classes: int
    adjacency: sp.csr_matrix
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        if self.adjacency.shape != (self.num_nodes, self.num_nodes):
            raise DatasetShapeError(f"Adjacency shape {self.adjacency.shape} for {self.num_nodes} nodes")
        if self.features.shape != (self.num_nodes, self.num_features):
            raise DatasetShapeError(
                f"Features shape {self.features.shape}, expected ({self.num_nodes}, {self.num_features})"
            )
        if self.labels.shape != (self.num_nodes,):
            raise DatasetShapeError(f"Labels shape {self.labels.shape} for {self.num_nodes} nodes")
        if self.num_nodes and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetShapeError(f"Labels out of range [0, {self.num_classes})")
        if (self.adjacency != self.adjacency.T).nnz != 0:
            raise DatasetShapeError("Adjacency is not symmetric")
        if self.adjacency.diagonal().any():
            raise DatasetShapeError("Adjacency stores self-loops")

    @cached_property
    def degrees(self) -> np.ndarray:
        return np.diff(self.adjacency.indptr)

    @property
    def num_edges(self) -> int:
        return self.adjacency.nnz // 2

    @cached_property
    def normalized_adjacency(self) -> sp.csr_matrix:
        return normalize_adjacency(self)

    @cached_property
    def mean_adjacency(self) -> sp.csr_matrix:
        degrees = self.degrees.astype(np.float64)
        inverse = np.divide(1.0, degrees, out=np.zeros_like(degrees), where=degrees > 0)
        mean_adj = (sp.diags(inverse) @ self.adjacency).tocsr()
        mean_adj.sort_indices()
        return mean_adj

    @cached_property
    def attention_pattern(self) -> sp.csr_matrix:
        pattern = (self.adjacency + sp.identity(self.num_nodes, format="csr")).tocsr()
        pattern.sort_indices()
        return pattern

    @cached_property
    def onehot(self) -> np.ndarray:
        onehot = np.zeros((self.num_nodes, self.num_classes))
        onehot[np.arange(self.num_nodes), self.labels] = 1.0
        return onehot

    def fingerprint(self) -> Dict[str, Union[str, int]]:
        return {"name": self.name, "num_nodes": self.num_nodes, "num_edges": self.num_edges}

    def __repr__(self) -> str:
        return (
            f"{self.__class__.__name__}(name={self.name!r}, nodes={self.num_nodes}, edges={self.num_edges}, "
            f"features={self.num_features}, classes={self.num_classes})"
        )


@dataclass
class SplitSpec:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    seed: int

    def __post_init__(self) -> None:
        self.train = np.asarray(self.train, dtype=np.int64)
        self.val = np.asarray(self.val, dtype=np.int64)
        self.test = np.asarray(self.test, dtype=np.int64)
        combined = np.concatenate([self.train, self.val, self.test])
        if np.unique(combined).size != combined.size:
            raise SplitError(f"Split sets for seed {self.seed} are not disjoint")

    def validate(self, g: GraphDataset) -> None:
        combined = np.concatenate([self.train, self.val, self.test])
        if combined.size and (combined.min() < 0 or combined.max() >= g.num_nodes):
            raise SplitError(f"Split for seed {self.seed} holds node ids outside [0, {g.num_nodes})")
        missing = set(range(g.num_classes)) - set(g.labels[self.train].tolist())
        if missing:
            raise SplitError(f"Classes {sorted(missing)} have no training nodes in split seed {self.seed}")

    def to_json(self) -> Dict[str, List[int]]:
        return {"train": self.train.tolist(), "val": self.val.tolist(), "test": self.test.tolist()}

    @classmethod
    def from_json(cls, json_dict: Dict[str, List[int]], seed: int) -> "SplitSpec":
        return cls(json_dict["train"], json_dict["val"], json_dict["test"], seed)


@dataclass
class HomophilyProfile:
    homophily: np.ndarray
    degrees: np.ndarray
    subspace: np.ndarray
    homophily_edges: np.ndarray
    degree_edges: np.ndarray
    homophily_bins: int = field(default=1)
    degree_bins: int = field(default=1)

    @property
    def num_subspaces(self) -> int:
        return self.homophily_bins * self.degree_bins

    def members(self, subspace_id: int) -> np.ndarray:
        return np.flatnonzero(self.subspace == subspace_id)

    def bin_bounds(self, subspace_id: int) -> Tuple[float, float, float, float]:
        h_bin, d_bin = divmod(subspace_id, self.degree_bins)
        return (
            float(self.homophily_edges[h_bin]),
            float(self.homophily_edges[h_bin + 1]),
            float(self.degree_edges[d_bin]),
            float(self.degree_edges[d_bin + 1]),
        )


def _read_lines(path: Path) -> List[str]:
    with open(path, "r") as f:
        return [line.strip() for line in f if line.strip()]


def _parse_int(text: str, path: Path, line: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise DatasetFormatError(f"{path.name} has a non-integer entry in line {line!r}")


def _read_features(path: Path, num_nodes: int, num_features: int) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < FEATURES_HEADER.size:
        raise DatasetFormatError(f"{path} is shorter than its header")
    magic, rows, cols, reserved = FEATURES_HEADER.unpack_from(raw)
    if magic != FEATURES_MAGIC:
        raise DatasetFormatError(f"{path} has bad magic bytes {magic!r}")
    if reserved != 0:
        raise DatasetFormatError(f"{path} has a non-zero reserved header field ({reserved})")
    if rows != num_nodes or cols != num_features:
        raise DatasetShapeError(f"features.bin is {rows}x{cols}, meta says {num_nodes}x{num_features}")
    body = raw[FEATURES_HEADER.size:]
    if len(body) != rows * cols * 4:
        raise DatasetShapeError(f"features.bin holds {len(body)} bytes of data, expected {rows * cols * 4}")
    return np.frombuffer(body, dtype="<f4").reshape(rows, cols).astype(np.float64)


def load_dataset(directory: Union[str, Path]) -> GraphDataset:
    directory = Path(directory)
    for filename in REQUIRED_FILES:
        if not (directory / filename).is_file():
            raise DatasetFormatError(f"Dataset directory {directory} is missing {filename}")
    with open(directory / "meta.json", "r") as f:
        meta = json.load(f)
    try:
        name = str(meta["name"])
        num_nodes = int(meta["num_nodes"])
        num_features = int(meta["num_features"])
        num_classes = int(meta["num_classes"])
    except KeyError as e:
        raise DatasetFormatError(f"meta.json is missing key {e}")
    except (TypeError, ValueError) as e:
        raise DatasetFormatError(f"meta.json has a malformed count: {e}")

    edges = []
    edges_path = directory / "edges.tsv"
    for line in _read_lines(edges_path):
        parts = line.split("\t")
        if len(parts) != 2:
            raise DatasetFormatError(f"Bad edge line: {line!r}")
        edges.append((_parse_int(parts[0], edges_path, line), _parse_int(parts[1], edges_path, line)))
    edge_array = np.array(edges, dtype=np.int64).reshape(-1, 2)
    if edge_array.size and (edge_array.min() < 0 or edge_array.max() >= num_nodes):
        raise DatasetShapeError(f"Edge endpoints outside [0, {num_nodes})")
    adjacency = canonical_adjacency(num_nodes, edge_array[:, 0], edge_array[:, 1])

    features = _read_features(directory / "features.bin", num_nodes, num_features)
    labels_path = directory / "labels.tsv"
    labels = np.array([_parse_int(line, labels_path, line) for line in _read_lines(labels_path)], dtype=np.int64)
    if labels.size != num_nodes:
        raise DatasetShapeError(f"labels.tsv has {labels.size} lines for {num_nodes} nodes")

    dataset = GraphDataset(name, num_nodes, num_features, num_classes, adjacency, features, labels)
    logger.info("Loaded dataset %s", dataset)
    return dataset


def load_splits(directory: Union[str, Path], seed: int) -> Optional[SplitSpec]:
    splits_path = Path(directory) / "splits.json"
    if not splits_path.is_file():
        return None
    with open(splits_path, "r") as f:
        all_splits = json.load(f)
    split_json = all_splits.get(str(seed))
    if split_json is None:
        return None
    return SplitSpec.from_json(split_json, seed)


def save_dataset(
        g: GraphDataset,
        directory: Union[str, Path],
        splits: Optional[Sequence[SplitSpec]] = None,
) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "name": g.name,
        "num_nodes": g.num_nodes,
        "num_features": g.num_features,
        "num_classes": g.num_classes,
    }
    with open(directory / "meta.json", "w") as f:
        json.dump(meta, f, indent=2)
    upper = sp.triu(g.adjacency, k=1).tocoo()
    order = np.lexsort((upper.col, upper.row))
    with open(directory / "edges.tsv", "w") as f:
        for i, j in zip(upper.row[order], upper.col[order]):
            f.write(f"{i}\t{j}\n")
    with open(directory / "features.bin", "wb") as f:
        f.write(FEATURES_HEADER.pack(FEATURES_MAGIC, g.num_nodes, g.num_features, 0))
        f.write(g.features.astype("<f4").tobytes())
    with open(directory / "labels.tsv", "w") as f:
        for label in g.labels:
            f.write(f"{label}\n")
    if splits:
        with open(directory / "splits.json", "w") as f:
            json.dump({str(split.seed): split.to_json() for split in splits}, f)
    logger.info("Saved dataset %s to %s", g.name, directory)


def normalize_adjacency(g: GraphDataset) -> sp.csr_matrix:
    """(D+I)^-1/2 (A+I) (D+I)^-1/2"""
    with_loops = g.adjacency + sp.identity(g.num_nodes, format="csr")
    inv_sqrt = sp.diags(1.0 / np.sqrt(g.degrees + 1.0))
    normalized = (inv_sqrt @ with_loops @ inv_sqrt).tocsr()
    normalized.sort_indices()
    return normalized


def node_homophily(g: GraphDataset) -> np.ndarray:
    """Fraction of same-label neighbours per node, NaN for isolated nodes."""
    rows = np.repeat(np.arange(g.num_nodes), g.degrees)
    same = (g.labels[rows] == g.labels[g.adjacency.indices]).astype(np.float64)
    same_counts = np.bincount(rows, weights=same, minlength=g.num_nodes)
    degrees = g.degrees.astype(np.float64)
    return np.divide(same_counts, degrees, out=np.full(g.num_nodes, np.nan), where=degrees > 0)


def partition_subspaces(g: GraphDataset, homophily_bins: int, degree_bins: int) -> HomophilyProfile:
    if homophily_bins < 1 or degree_bins < 1:
        raise DatasetException(f"Bin counts must be at least 1, got {homophily_bins}x{degree_bins}")
    homophily = node_homophily(g)
    degrees = g.degrees
    connected = degrees > 0
    h_edges = np.linspace(0.0, 1.0, homophily_bins + 1)
    if connected.any():
        d_edges = np.quantile(degrees[connected].astype(np.float64), np.linspace(0.0, 1.0, degree_bins + 1))
    else:
        d_edges = np.zeros(degree_bins + 1)
    subspace = np.full(g.num_nodes, -1, dtype=np.int64)
    h_bin = np.clip(np.floor(homophily[connected] * homophily_bins).astype(np.int64), 0, homophily_bins - 1)
    d_bin = np.clip(np.searchsorted(d_edges, degrees[connected], side="right") - 1, 0, degree_bins - 1)
    subspace[connected] = h_bin * degree_bins + d_bin
    return HomophilyProfile(homophily, degrees, subspace, h_edges, d_edges, homophily_bins, degree_bins)


def generate_block_model(
        n: int,
        block_probs: np.ndarray,
        d: int,
        noise: float,
        rng: RngState,
        centroid_scale: float = 2.0,
        name: str = "block-model",
) -> GraphDataset:
    """
    Stochastic block model with per-class-pair edge probabilities. Labels are balanced, features are a scaled
    one-hot class centroid plus gaussian noise, stored at 32-bit precision so they survive a save/load cycle.
    """
    block_probs = np.asarray(block_probs, dtype=np.float64)
    classes = block_probs.shape[0]
    if n < classes:
        raise DatasetException(f"Cannot spread {classes} classes over {n} nodes")
    if d < 1:
        raise DatasetException(f"Feature dimension must be at least 1, got {d}")
    labels = (np.arange(n) % classes)[rng.permutation(n)].astype(np.int64)
    upper_rows, upper_cols = np.triu_indices(n, k=1)
    pair_probs = block_probs[labels[upper_rows], labels[upper_cols]]
    keep = rng.uniform((pair_probs.size,)) < pair_probs
    adjacency = canonical_adjacency(n, upper_rows[keep], upper_cols[keep])
    centroids = np.zeros((n, d))
    centroids[np.arange(n), labels % d] = centroid_scale
    features = (centroids + noise * rng.normal((n, d))).astype(np.float32).astype(np.float64)
    dataset = GraphDataset(name, n, d, classes, adjacency, features, labels)
    logger.info("Generated %s", dataset)
    return dataset


def generate_sbm(
        n: int,
        classes: int,
        p_in: float,
        p_out: float,
        d: int,
        noise: float,
        rng: RngState,
) -> GraphDataset:
    if n < classes:
        raise DatasetException(f"Cannot spread {classes} classes over {n} nodes")
    block_probs = np.full((classes, classes), p_out)
    np.fill_diagonal(block_probs, p_in)
    return generate_block_model(n, block_probs, d, noise, rng, name=f"sbm-n{n}-c{classes}")


def generate_mixed_sbm(
        n: int,
        classes: int,
        p_in: float,
        p_out: float,
        d: int,
        noise: float,
        rng: RngState,
) -> GraphDataset:
    """
    First half of the classes are assortative (p_in within, p_out across); the rest are disassortative, linking
    to each other with p_in and within themselves with p_out.
    """
    if classes < 3:
        raise DatasetException(f"A mixed block model needs at least 3 classes, got {classes}")
    if n < classes:
        raise DatasetException(f"Cannot spread {classes} classes over {n} nodes")
    assortative = classes - classes // 2
    block_probs = np.full((classes, classes), p_out)
    for c in range(assortative):
        block_probs[c, c] = p_in
    block_probs[assortative:, assortative:] = p_in
    for c in range(assortative, classes):
        block_probs[c, c] = p_out
    return generate_block_model(n, block_probs, d, noise, rng, name=f"mixed-sbm-n{n}-c{classes}")


def _largest_remainder(total: int, ratios: Sequence[float]) -> List[int]:
    exact = [total * r for r in ratios]
    counts = [int(np.floor(x)) for x in exact]
    remainders = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in remainders[:total - sum(counts)]:
        counts[i] += 1
    return counts


def make_splits(g: GraphDataset, ratios: Sequence[float] = DEFAULT_SPLIT_RATIOS, seed: int = 0) -> SplitSpec:
    """
    Stratified split. Nodes are shuffled within each class, then interleaved by their relative rank in the class
    so every prefix of the ordering holds the classes in proportion. The first share goes to train, then val.
    """
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise SplitError(f"Split ratios must be three non-negative values summing to 1, got {ratios}")
    rng = RngState(seed)
    nodes = []
    rank_keys = []
    class_keys = []
    for c in range(g.num_classes):
        members = np.flatnonzero(g.labels == c)
        if members.size < 3:
            raise SplitError(f"Class {c} has {members.size} nodes, at least 3 needed to stratify")
        nodes.append(members[rng.permutation(members.size)])
        rank_keys.append(np.arange(members.size) / members.size)
        class_keys.append(np.full(members.size, c))
    all_nodes = np.concatenate(nodes)
    order = np.lexsort((np.concatenate(class_keys), np.concatenate(rank_keys)))
    ordered = all_nodes[order]
    n_train, n_val, _ = _largest_remainder(ordered.size, ratios)
    split = SplitSpec(
        np.sort(ordered[:n_train]),
        np.sort(ordered[n_train:n_train + n_val]),
        np.sort(ordered[n_train + n_val:]),
        seed,
    )
    split.validate(g)
    return split


def permute_dataset(g: GraphDataset, perm: np.ndarray) -> GraphDataset:
    """New node k is old node perm[k]."""
    perm = np.asarray(perm, dtype=np.int64)
    adjacency = g.adjacency[perm][:, perm].tocsr()
    adjacency.sort_indices()
    return GraphDataset(
        g.name, g.num_nodes, g.num_features, g.num_classes, adjacency, g.features[perm], g.labels[perm],
    )
