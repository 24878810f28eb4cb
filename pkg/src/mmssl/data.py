"""Interaction graphs, modality feature tables, splits and synthetic data.

External formats:

* interaction file: UTF-8 lines ``user_id<TAB>item_id``, optional header
  line ``# users=<n> items=<m>``, blank lines ignored;
* feature file: magic ``MMF1``, u32 LE row count, u32 LE column count,
  then rows*cols float32 LE values in row-major order;
* synthetic spec: a small JSON document (see ``SyntheticSpec``).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

__all__ = [
    "DataFormatError",
    "InteractionGraph",
    "ModalityFeatureTable",
    "DataSplit",
    "TripletBatch",
    "SyntheticSpec",
    "load_interactions",
    "write_interactions",
    "graph_from_edges",
    "load_modality_features",
    "write_modality_features",
    "split_edges",
    "sample_bpr_triplets",
    "NormalizedAdjacency",
    "build_norm_adjacency",
    "sparsity_buckets",
    "bucket_labels",
    "generate_synthetic",
]

FEATURE_MAGIC = b"MMF1"


class DataFormatError(ValueError):
    """Raised for malformed or inconsistent input files."""


@dataclass
class InteractionGraph:
    """Bipartite user-item interactions with contiguous integer ids."""

    num_users: int
    num_items: int
    user_items: list[np.ndarray]  # per user, sorted item ids
    item_users: list[np.ndarray]  # per item, sorted user ids
    edge_set: frozenset[tuple[int, int]]

    @property
    def num_edges(self) -> int:
        return len(self.edge_set)

    def edges(self) -> list[tuple[int, int]]:
        return sorted(self.edge_set)

    def user_degree(self) -> np.ndarray:
        return np.array([len(v) for v in self.user_items], dtype=np.int64)

    def sparsity(self) -> float:
        cells = self.num_users * self.num_items
        if cells == 0:
            return 1.0
        return 1.0 - self.num_edges / cells

    def dense_matrix(self) -> np.ndarray:
        a = np.zeros((self.num_users, self.num_items))
        for u, items in enumerate(self.user_items):
            a[u, items] = 1.0
        return a


def graph_from_edges(num_users: int, num_items: int, edges) -> InteractionGraph:
    """Build a graph from (user, item) pairs, validating ranges and duplicates."""
    user_items: list[list[int]] = [[] for _ in range(num_users)]
    item_users: list[list[int]] = [[] for _ in range(num_items)]
    seen: set[tuple[int, int]] = set()
    for u, i in edges:
        u, i = int(u), int(i)
        if not (0 <= u < num_users and 0 <= i < num_items):
            raise DataFormatError(f"edge ({u}, {i}) outside declared id range")
        if (u, i) in seen:
            raise DataFormatError(f"duplicate edge ({u}, {i})")
        seen.add((u, i))
        user_items[u].append(i)
        item_users[i].append(u)
    return InteractionGraph(
        num_users=num_users,
        num_items=num_items,
        user_items=[np.array(sorted(v), dtype=np.int64) for v in user_items],
        item_users=[np.array(sorted(v), dtype=np.int64) for v in item_users],
        edge_set=frozenset(seen),
    )


def _parse_header(line: str, lineno: int) -> tuple[int, int]:
    body = line.lstrip("#").strip()
    parts = dict()
    for chunk in body.split():
        if "=" not in chunk:
            raise DataFormatError(f"line {lineno}: malformed header field '{chunk}'")
        key, _, value = chunk.partition("=")
        parts[key] = value
    try:
        return int(parts["users"]), int(parts["items"])
    except (KeyError, ValueError) as e:
        raise DataFormatError(f"line {lineno}: header must declare users=<n> items=<m>") from e


def load_interactions(path) -> InteractionGraph:
    """Read an interaction file.  Header counts win; otherwise max id + 1."""
    path = Path(path)
    declared: tuple[int, int] | None = None
    edges: list[tuple[int, int]] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                if declared is not None:
                    raise DataFormatError(f"line {lineno}: repeated header")
                if edges:
                    raise DataFormatError(f"line {lineno}: header must precede edges")
                declared = _parse_header(line, lineno)
                continue
            fields = line.split("\t")
            if len(fields) != 2:
                raise DataFormatError(f"line {lineno}: expected 'user<TAB>item', got {raw!r}")
            try:
                u, i = int(fields[0]), int(fields[1])
            except ValueError:
                raise DataFormatError(f"line {lineno}: non-integer id in {raw!r}") from None
            if u < 0 or i < 0:
                raise DataFormatError(f"line {lineno}: negative id in {raw!r}")
            edges.append((u, i))
    if declared is not None:
        num_users, num_items = declared
    else:
        num_users = 1 + max((u for u, _ in edges), default=-1)
        num_items = 1 + max((i for _, i in edges), default=-1)
    return graph_from_edges(num_users, num_items, edges)


def write_interactions(graph: InteractionGraph, path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(f"# users={graph.num_users} items={graph.num_items}\n")
        for u, i in graph.edges():
            fh.write(f"{u}\t{i}\n")


def load_modality_features(path) -> "ModalityFeatureTable":
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != FEATURE_MAGIC:
        raise DataFormatError(f"{path.name}: bad magic {blob[:4]!r}")
    if len(blob) < 12:
        raise DataFormatError(f"{path.name}: truncated header")
    rows, cols = struct.unpack("<II", blob[4:12])
    expected = 12 + rows * cols * 4
    if len(blob) != expected:
        raise DataFormatError(
            f"{path.name}: payload is {len(blob) - 12} bytes, expected {rows * cols * 4}"
        )
    values = np.frombuffer(blob, dtype="<f4", offset=12).reshape(rows, cols)
    if not np.all(np.isfinite(values)):
        raise DataFormatError(f"{path.name}: non-finite feature value")
    return ModalityFeatureTable(name=path.stem, values=values)


def write_modality_features(path, values: np.ndarray) -> None:
    values = np.ascontiguousarray(values, dtype="<f4")
    if values.ndim != 2:
        raise DataFormatError("feature table must be 2-D")
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", values.shape[0], values.shape[1]))
        fh.write(values.tobytes(order="C"))


@dataclass
class ModalityFeatureTable:
    """Raw per-item features for one modality.  Stored 32-bit, promoted on use."""

    name: str
    values: np.ndarray

    @property
    def num_items(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def as_float64(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


# --------------------------------------------------------------------------
# Splits and sampling
# --------------------------------------------------------------------------


@dataclass
class DataSplit:
    train: list[tuple[int, int]]
    val: list[tuple[int, int]]
    test: list[tuple[int, int]]
    seed: int
    cold_users: frozenset[int] = field(default_factory=frozenset)

    def train_graph(self, graph: InteractionGraph) -> InteractionGraph:
        return graph_from_edges(graph.num_users, graph.num_items, self.train)


def split_edges(
    graph: InteractionGraph,
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> DataSplit:
    """Deterministic per-user stratified split.

    Every interacting user keeps at least one train edge (a single-edge
    user goes entirely to train); users with no edges at all are flagged
    cold.  Remaining edges are pooled and cut by the global ratios.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    reserved: list[tuple[int, int]] = []
    pool: list[tuple[int, int]] = []
    cold = []
    for u in range(graph.num_users):
        items = graph.user_items[u]
        if len(items) == 0:
            cold.append(u)
            continue
        order = rng.permutation(len(items))
        reserved.append((u, int(items[order[0]])))
        pool.extend((u, int(items[j])) for j in order[1:])
    total = len(reserved) + len(pool)
    n_val = int(round(ratios[1] * total))
    n_test = int(round(ratios[2] * total))
    n_train = total - n_val - n_test
    if n_train < len(reserved):
        n_train = len(reserved)
        n_val = min(n_val, total - n_train)
        n_test = total - n_train - n_val
    perm = rng.permutation(len(pool))
    pool = [pool[j] for j in perm]
    extra_train = n_train - len(reserved)
    train = reserved + pool[:extra_train]
    val = pool[extra_train : extra_train + n_val]
    test = pool[extra_train + n_val :]
    return DataSplit(
        train=sorted(train),
        val=sorted(val),
        test=sorted(test),
        seed=seed,
        cold_users=frozenset(cold),
    )


@dataclass
class TripletBatch:
    users: np.ndarray
    pos_items: np.ndarray
    neg_items: np.ndarray

    def __len__(self) -> int:
        return len(self.users)


def sample_bpr_triplets(
    split: DataSplit,
    graph: InteractionGraph,
    batch: int,
    rng: np.random.Generator,
) -> TripletBatch:
    """Uniformly sample train edges, pairing each with a rejected negative.

    Negatives are uniform over items not observed for that user anywhere in
    the dataset.  A user interacting with every item has no valid negative.
    """
    edges = split.train
    if not edges:
        raise ValueError("cannot sample triplets from an empty train split")
    idx = rng.integers(0, len(edges), size=batch)
    users = np.empty(batch, dtype=np.int64)
    pos = np.empty(batch, dtype=np.int64)
    neg = np.empty(batch, dtype=np.int64)
    for row, j in enumerate(idx):
        u, i = edges[j]
        if len(graph.user_items[u]) >= graph.num_items:
            raise ValueError(f"user {u} interacts with every item; no negative exists")
        while True:
            cand = int(rng.integers(0, graph.num_items))
            if (u, cand) not in graph.edge_set:
                break
        users[row], pos[row], neg[row] = u, i, cand
    return TripletBatch(users=users, pos_items=pos, neg_items=neg)


# --------------------------------------------------------------------------
# Normalized adjacency
# --------------------------------------------------------------------------


@dataclass
class NormalizedAdjacency:
    """Degree-normalized message-passing operators for both directions.

    ``user_from_item[u, i] = 1/sqrt(|N_u|)`` on observed edges, so a row's
    squared entries sum to one; ``item_from_user`` is the item-side analog.
    """

    user_from_item: sp.csr_matrix  # (U, I)
    item_from_user: sp.csr_matrix  # (I, U)


def build_norm_adjacency(graph: InteractionGraph) -> NormalizedAdjacency:
    rows, cols, vals = [], [], []
    for u in range(graph.num_users):
        items = graph.user_items[u]
        if len(items) == 0:
            continue
        w = 1.0 / np.sqrt(len(items))
        rows.extend([u] * len(items))
        cols.extend(items.tolist())
        vals.extend([w] * len(items))
    user_from_item = sp.csr_matrix(
        (vals, (rows, cols)), shape=(graph.num_users, graph.num_items)
    )
    rows, cols, vals = [], [], []
    for i in range(graph.num_items):
        users = graph.item_users[i]
        if len(users) == 0:
            continue
        w = 1.0 / np.sqrt(len(users))
        rows.extend([i] * len(users))
        cols.extend(users.tolist())
        vals.extend([w] * len(users))
    item_from_user = sp.csr_matrix(
        (vals, (rows, cols)), shape=(graph.num_items, graph.num_users)
    )
    return NormalizedAdjacency(user_from_item=user_from_item, item_from_user=item_from_user)


# --------------------------------------------------------------------------
# Sparsity buckets
# --------------------------------------------------------------------------

DEFAULT_BUCKET_BOUNDARIES = (0, 4, 6, 9, 13, 100)


def bucket_labels(boundaries=DEFAULT_BUCKET_BOUNDARIES) -> list[str]:
    return [f"[{a},{b})" for a, b in zip(boundaries[:-1], boundaries[1:])]


def sparsity_buckets(
    degrees: np.ndarray,
    boundaries=DEFAULT_BUCKET_BOUNDARIES,
) -> dict[str, np.ndarray]:
    """Partition users into half-open interaction-count ranges.

    Degrees below the first boundary fall into the first bucket and degrees
    at or above the last boundary into the last, so the result is always a
    partition of all users.
    """
    bounds = list(boundaries)
    if sorted(bounds) != bounds or len(set(bounds)) != len(bounds):
        raise ValueError(f"bucket boundaries must be strictly ascending, got {boundaries}")
    if len(bounds) < 2:
        raise ValueError("need at least two boundaries")
    degrees = np.asarray(degrees)
    labels = bucket_labels(bounds)
    edges = np.array(bounds[1:-1])
    which = np.searchsorted(edges, degrees, side="right")
    return {label: np.flatnonzero(which == k) for k, label in enumerate(labels)}


# --------------------------------------------------------------------------
# Synthetic data with planted structure
# --------------------------------------------------------------------------


@dataclass
class SyntheticSpec:
    """Recipe for a small dataset with recoverable planted preferences."""

    num_users: int = 50
    num_items: int = 40
    modality_dims: tuple[int, ...] = (24, 16)
    latent_dim: int = 6
    # sparse and noisy by default: with few observed edges per user the
    # collaborative signal alone ranks poorly, and corrupted features leave
    # room for the learned relation matrices to improve on raw similarity
    interactions_per_user: int = 2
    noise: float = 0.5
    seed: int = 0

    @property
    def num_modalities(self) -> int:
        return len(self.modality_dims)

    @classmethod
    def from_json(cls, doc: dict) -> "SyntheticSpec":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(doc) - known
        if extra:
            raise DataFormatError(f"unknown synthetic spec fields: {sorted(extra)}")
        kwargs = dict(doc)
        if "modality_dims" in kwargs:
            kwargs["modality_dims"] = tuple(int(d) for d in kwargs["modality_dims"])
        spec = cls(**kwargs)
        if spec.num_users <= 0 or spec.num_items <= 0:
            raise DataFormatError("synthetic spec needs positive user/item counts")
        if spec.interactions_per_user > spec.num_items:
            raise DataFormatError("interactions_per_user cannot exceed num_items")
        if not 0.0 <= spec.noise:
            raise DataFormatError("noise must be non-negative")
        return spec

    def to_json(self) -> dict:
        return {
            "num_users": self.num_users,
            "num_items": self.num_items,
            "modality_dims": list(self.modality_dims),
            "latent_dim": self.latent_dim,
            "interactions_per_user": self.interactions_per_user,
            "noise": self.noise,
            "seed": self.seed,
        }

    @classmethod
    def load(cls, path) -> "SyntheticSpec":
        with Path(path).open("r", encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as e:
                raise DataFormatError(f"synthetic spec is not valid JSON: {e}") from e
        return cls.from_json(doc)


def generate_synthetic(
    spec: SyntheticSpec,
) -> tuple[InteractionGraph, list[ModalityFeatureTable], np.ndarray]:
    """Plant user/item latents, derive features and interactions from them.

    Each modality's features are a linear map of the item latents plus
    scaled gaussian noise (the identity map when the dimensions agree, so a
    noise-free spec reproduces the latents exactly).  Each user interacts
    with exactly ``interactions_per_user`` distinct items drawn without
    replacement in proportion to softmax(z_u . z_i).  Returns the graph,
    the feature tables and the planted affinity matrix z_u . z_i.
    """
    rng = np.random.default_rng(spec.seed)
    z_u = rng.standard_normal((spec.num_users, spec.latent_dim))
    z_i = rng.standard_normal((spec.num_items, spec.latent_dim))
    features = []
    for m, dim in enumerate(spec.modality_dims):
        if dim == spec.latent_dim:
            mapped = z_i.copy()
        else:
            basis = rng.standard_normal((spec.latent_dim, dim)) / np.sqrt(spec.latent_dim)
            mapped = z_i @ basis
        if spec.noise > 0:
            mapped = mapped + spec.noise * mapped.std() * rng.standard_normal(mapped.shape)
        features.append(ModalityFeatureTable(name=f"modality{m}", values=mapped.astype("<f4")))
    planted = z_u @ z_i.T
    edges = []
    for u in range(spec.num_users):
        logits = planted[u] - planted[u].max()
        probs = np.exp(logits)
        probs /= probs.sum()
        chosen = rng.choice(spec.num_items, size=spec.interactions_per_user, replace=False, p=probs)
        edges.extend((u, int(i)) for i in chosen)
    graph = graph_from_edges(spec.num_users, spec.num_items, edges)
    return graph, features, planted
