"""Clustering of embedding matrices into the cluster structure the MDP runs over.

Provides Lloyd's k-means with seeded k-means++ initialization, a
label-stratified variant that keeps every cluster label-pure, and
per-cluster subsampling (uniform or furthest-from-centroid) used both for
reward queries and for representative-sample state encodings.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Optional, Sequence

import numpy as np

from .rngutil import derive_rng, derive_seed

EMBEDDING_MAGIC = b"SUBSELEM"

SubsampleStrategy = Literal["random", "furthest"]

DEFAULT_SUBSAMPLE_SIZE = 64


@dataclass(frozen=True)
class EmbeddingMatrix:
    """Dense point embeddings; row index doubles as the stable point id."""

    rows: np.ndarray

    def __post_init__(self):
        rows = np.ascontiguousarray(np.asarray(self.rows, dtype=np.float64))
        if rows.ndim != 2:
            raise ValueError(f"embedding matrix must be 2-d, got shape {rows.shape}")
        if rows.shape[0] < 1 or rows.shape[1] < 1:
            raise ValueError(f"embedding matrix must be non-empty, got shape {rows.shape}")
        if not np.isfinite(rows).all():
            raise ValueError("embedding matrix contains non-finite components")
        object.__setattr__(self, "rows", rows)

    @property
    def n_points(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]


@dataclass
class ClusterModel:
    """A clustering of an embedding matrix plus per-cluster subsamples.

    Every point belongs to exactly one cluster, no cluster is empty, and
    member/subsample lists are sorted point ids. `subsamples[i]` is the fixed
    set of ids that stands in for cluster i in reward queries.
    """

    embeddings: EmbeddingMatrix
    assignment: np.ndarray
    centroids: np.ndarray
    subsample_size: int
    subsample_strategy: SubsampleStrategy
    subsample_seed: int
    members: list = field(default_factory=list)
    subsamples: list = field(default_factory=list)
    labels: Optional[np.ndarray] = None
    inertia_history: list = field(default_factory=list)
    n_iterations: int = 0

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    @property
    def n_points(self) -> int:
        return self.assignment.shape[0]

    @property
    def inertia(self) -> float:
        return self.inertia_history[-1] if self.inertia_history else float("nan")

    def subsample_union(self, clusters: Sequence[int]) -> np.ndarray:
        """Sorted, deduplicated point ids of the joined cluster subsamples."""
        if len(clusters) == 0:
            return np.empty(0, dtype=np.int64)
        parts = [self.subsamples[int(c)] for c in clusters]
        return np.unique(np.concatenate(parts))

    def member_union(self, clusters: Sequence[int]) -> np.ndarray:
        """Sorted, deduplicated point ids of the joined full member lists."""
        if len(clusters) == 0:
            return np.empty(0, dtype=np.int64)
        parts = [self.members[int(c)] for c in clusters]
        return np.unique(np.concatenate(parts))


def _build_members(assignment: np.ndarray, k: int) -> list:
    members = [np.flatnonzero(assignment == i).astype(np.int64) for i in range(k)]
    for i, m in enumerate(members):
        if m.size == 0:
            raise AssertionError(f"cluster {i} is empty after clustering")
    return members


def _finish_model(
    embeddings: EmbeddingMatrix,
    assignment: np.ndarray,
    centroids: np.ndarray,
    subsample_size: int,
    subsample_strategy: SubsampleStrategy,
    subsample_seed: int,
    labels: Optional[np.ndarray],
    inertia_history: list,
    n_iterations: int,
) -> ClusterModel:
    model = ClusterModel(
        embeddings=embeddings,
        assignment=assignment,
        centroids=centroids,
        subsample_size=subsample_size,
        subsample_strategy=subsample_strategy,
        subsample_seed=subsample_seed,
        labels=labels,
        inertia_history=inertia_history,
        n_iterations=n_iterations,
    )
    model.members = _build_members(assignment, model.k)
    model.subsamples = [
        subsample_cluster(model, i, subsample_size, subsample_strategy, subsample_seed)
        for i in range(model.k)
    ]
    return model


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """(n, k) squared Euclidean distances, clipped at zero."""
    d2 = (
        np.sum(points * points, axis=1)[:, None]
        - 2.0 * points @ centers.T
        + np.sum(centers * centers, axis=1)[None, :]
    )
    return np.maximum(d2, 0.0)


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Seeded k-means++ seeding; falls back to uniform picks among unchosen
    points when all remaining distances are zero (duplicate rows)."""
    n = points.shape[0]
    chosen = np.zeros(n, dtype=bool)
    first = int(rng.integers(n))
    chosen[first] = True
    centers = [first]
    d2 = _sq_dists(points, points[first][None, :])[:, 0]
    for _ in range(k - 1):
        total = float(d2.sum())
        if total > 0.0:
            probs = d2 / total
            idx = int(rng.choice(n, p=probs))
        else:
            remaining = np.flatnonzero(~chosen)
            idx = int(remaining[rng.integers(remaining.size)])
        chosen[idx] = True
        centers.append(idx)
        d2 = np.minimum(d2, _sq_dists(points, points[idx][None, :])[:, 0])
    return points[np.array(centers, dtype=np.int64)].copy()


def _repair_empty(
    points: np.ndarray,
    centroids: np.ndarray,
    assignment: np.ndarray,
    k: int,
) -> np.ndarray:
    """Move the point with the largest distance to its own centroid into each
    empty cluster. Only donor clusters with two or more members give up points,
    so no cluster is emptied by the repair."""
    counts = np.bincount(assignment, minlength=k)
    empties = np.flatnonzero(counts == 0)
    if empties.size == 0:
        return assignment
    assignment = assignment.copy()
    d2_own = np.sum((points - centroids[assignment]) ** 2, axis=1)
    for empty in empties:
        donors = np.flatnonzero(counts[assignment] >= 2)
        if donors.size == 0:
            raise AssertionError("cannot repair empty cluster: no donor members")
        far = donors[int(np.argmax(d2_own[donors]))]
        counts[assignment[far]] -= 1
        assignment[far] = empty
        counts[empty] += 1
        d2_own[far] = 0.0
    return assignment


def _lloyd(points: np.ndarray, k: int, seed: int, max_iters: int):
    """Core Lloyd iterations. Returns (assignment, centroids, inertia
    history, iteration count); the inertia history is non-increasing."""
    rng = derive_rng(seed, "kmeans-init")
    centroids = _kmeans_pp_init(points, k, rng)
    assignment = None
    inertia_history = []
    iterations = 0
    for _ in range(max_iters):
        iterations += 1
        d2 = _sq_dists(points, centroids)
        new_assignment = np.argmin(d2, axis=1).astype(np.int64)
        new_assignment = _repair_empty(points, centroids, new_assignment, k)
        for i in range(k):
            sel = new_assignment == i
            centroids[i] = points[sel].mean(axis=0)
        inertia = float(np.sum((points - centroids[new_assignment]) ** 2))
        inertia_history.append(inertia)
        if assignment is not None and np.array_equal(assignment, new_assignment):
            assignment = new_assignment
            break
        assignment = new_assignment
    return assignment, centroids, inertia_history, iterations


def kmeans(
    embeddings: EmbeddingMatrix,
    k: int,
    seed: int,
    max_iters: int = 100,
    subsample_size: int = DEFAULT_SUBSAMPLE_SIZE,
    subsample_strategy: SubsampleStrategy = "furthest",
) -> ClusterModel:
    """Lloyd's k-means with k-means++ seeding.

    Runs until assignments stop changing or `max_iters` is hit. Empty
    clusters are repaired by reassigning the point farthest from its own
    centroid, so the returned model never has an empty cluster.
    """
    if not 1 <= k <= embeddings.n_points:
        raise ValueError(f"k must be in [1, {embeddings.n_points}], got {k}")
    if max_iters < 1:
        raise ValueError(f"max_iters must be >= 1, got {max_iters}")
    assignment, centroids, inertia_history, iterations = _lloyd(
        embeddings.rows, k, seed, max_iters
    )
    return _finish_model(
        embeddings,
        assignment,
        centroids,
        subsample_size,
        subsample_strategy,
        derive_seed(seed, "subsample"),
        labels=None,
        inertia_history=inertia_history,
        n_iterations=iterations,
    )


def _allocate_cluster_counts(class_sizes: np.ndarray, k: int) -> np.ndarray:
    """Split k cluster slots across label classes proportionally to class
    size (largest-remainder rounding), with at least one slot per class and
    never more slots than a class has points."""
    n = int(class_sizes.sum())
    n_classes = class_sizes.size
    quotas = k * class_sizes.astype(np.float64) / n
    alloc = np.floor(quotas).astype(np.int64)
    remainders = quotas - alloc
    deficit = k - int(alloc.sum())
    order = np.lexsort((np.arange(n_classes), -remainders))
    for idx in order[:deficit]:
        alloc[idx] += 1
    # Guarantee every class at least one cluster by taking from the largest.
    while (alloc == 0).any():
        taker = int(np.flatnonzero(alloc == 0)[0])
        donors = np.flatnonzero(alloc > 1)
        if donors.size == 0:
            raise ValueError("cannot allocate one cluster per label")
        giver = int(donors[np.argmax(alloc[donors])])
        alloc[giver] -= 1
        alloc[taker] += 1
    assert int(alloc.sum()) == k
    assert (alloc >= 1).all() and (alloc <= class_sizes).all()
    return alloc


def stratified_kmeans(
    embeddings: EmbeddingMatrix,
    labels: np.ndarray,
    k: int,
    seed: int,
    max_iters: int = 100,
    subsample_size: int = DEFAULT_SUBSAMPLE_SIZE,
    subsample_strategy: SubsampleStrategy = "furthest",
) -> ClusterModel:
    """k-means run independently inside each label class, so every returned
    cluster contains points of a single label. Cluster counts per class are
    proportional to class size (largest remainder), minimum one per class.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (embeddings.n_points,):
        raise ValueError(
            f"labels must have length {embeddings.n_points}, got shape {labels.shape}"
        )
    if labels.min() < 0:
        raise ValueError("labels must be non-negative integers")
    n_labels = int(labels.max()) + 1
    class_sizes = np.bincount(labels, minlength=n_labels)
    if (class_sizes == 0).any():
        missing = np.flatnonzero(class_sizes == 0).tolist()
        raise ValueError(f"label classes {missing} have no points")
    if k < n_labels:
        raise ValueError(
            f"k={k} is less than the number of labels {n_labels}; "
            "every label needs at least one cluster"
        )
    if k > embeddings.n_points:
        raise ValueError(f"k must be at most n_points={embeddings.n_points}, got {k}")

    alloc = _allocate_cluster_counts(class_sizes, k)
    assignment = np.full(embeddings.n_points, -1, dtype=np.int64)
    centroid_blocks = []
    inertia_total = 0.0
    next_cluster = 0
    iterations = 0
    for label in range(n_labels):
        ids = np.flatnonzero(labels == label)
        sub_points = embeddings.rows[ids]
        sub_assignment, sub_centroids, history, sub_iters = _lloyd(
            sub_points, int(alloc[label]), derive_seed(seed, "stratified", label), max_iters
        )
        assignment[ids] = next_cluster + sub_assignment
        centroid_blocks.append(sub_centroids)
        inertia_total += history[-1]
        iterations = max(iterations, sub_iters)
        next_cluster += int(alloc[label])
    centroids = np.vstack(centroid_blocks)
    return _finish_model(
        embeddings,
        assignment,
        centroids,
        subsample_size,
        subsample_strategy,
        derive_seed(seed, "subsample"),
        labels=labels,
        inertia_history=[inertia_total],
        n_iterations=iterations,
    )


def subsample_cluster(
    model: ClusterModel,
    cluster: int,
    m: int,
    strategy: SubsampleStrategy,
    seed: int,
) -> np.ndarray:
    """Pick m representative point ids from one cluster, sorted by id.

    "random" draws uniformly without replacement from a per-cluster stream
    derived from (seed, cluster); "furthest" takes the m members farthest
    from the centroid, breaking distance ties toward the smaller point id.
    Saturates to the full member list when m >= cluster size.
    """
    if not 0 <= cluster < model.k:
        raise ValueError(f"cluster must be in [0, {model.k}), got {cluster}")
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    members = model.members[cluster]
    if m >= members.size:
        return members.copy()
    if strategy == "random":
        rng = derive_rng(seed, "subsample", cluster)
        pick = rng.choice(members.size, size=m, replace=False)
        return np.sort(members[pick])
    if strategy == "furthest":
        diffs = model.embeddings.rows[members] - model.centroids[cluster]
        d2 = np.sum(diffs * diffs, axis=1)
        # lexsort: primary key descending distance, ties by ascending id
        order = np.lexsort((members, -d2))
        return np.sort(members[order[:m]])
    raise ValueError(f"unknown subsample strategy {strategy!r}")


# ---------------------------------------------------------------------------
# File formats


def write_embeddings(path, matrix) -> None:
    """Binary embedding file: magic, little-endian uint32 header length,
    UTF-8 JSON header, then row-major little-endian float32 data."""
    if not isinstance(matrix, EmbeddingMatrix):
        matrix = EmbeddingMatrix(rows=np.asarray(matrix, dtype=np.float64))
    header = json.dumps(
        {"n": matrix.n_points, "dim": matrix.dim, "dtype": "f32"}
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(EMBEDDING_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(matrix.rows.astype("<f4").tobytes(order="C"))


def read_embeddings(path) -> EmbeddingMatrix:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != EMBEDDING_MAGIC:
            raise ValueError(f"bad embedding file magic {magic!r}")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        if header.get("dtype") != "f32":
            raise ValueError(f"unsupported embedding dtype {header.get('dtype')!r}")
        n, dim = int(header["n"]), int(header["dim"])
        data = np.frombuffer(fh.read(n * dim * 4), dtype="<f4")
        if data.size != n * dim:
            raise ValueError("embedding file truncated")
    return EmbeddingMatrix(rows=data.reshape(n, dim).astype(np.float64))


def read_labels(path) -> np.ndarray:
    lines = Path(path).read_text().split()
    return np.array([int(x) for x in lines], dtype=np.int64)


def write_labels(path, labels) -> None:
    Path(path).write_text("".join(f"{int(x)}\n" for x in labels))


def export_cluster_model(model: ClusterModel, path) -> None:
    """JSON model description plus a sibling binary centroid matrix."""
    path = Path(path)
    centroids_path = path.with_suffix(".centroids.bin")
    write_embeddings(centroids_path, EmbeddingMatrix(rows=model.centroids))
    doc = {
        "k": model.k,
        "n_points": model.n_points,
        "assignment": model.assignment.tolist(),
        "centroids_path": centroids_path.name,
        "subsample_size": model.subsample_size,
        "subsample_strategy": model.subsample_strategy,
        "subsample_seed": model.subsample_seed,
        "subsamples": [s.tolist() for s in model.subsamples],
        "labels": model.labels.tolist() if model.labels is not None else None,
    }
    path.write_text(json.dumps(doc, indent=1))
    return path


def load_cluster_model(path, embeddings: EmbeddingMatrix) -> ClusterModel:
    path = Path(path)
    doc = json.loads(path.read_text())
    centroids = read_embeddings(path.parent / doc["centroids_path"]).rows
    assignment = np.array(doc["assignment"], dtype=np.int64)
    if assignment.shape[0] != embeddings.n_points:
        raise ValueError(
            f"cluster model covers {assignment.shape[0]} points but the "
            f"embedding matrix has {embeddings.n_points}"
        )
    labels = doc.get("labels")
    model = ClusterModel(
        embeddings=embeddings,
        assignment=assignment,
        centroids=centroids,
        subsample_size=int(doc["subsample_size"]),
        subsample_strategy=doc["subsample_strategy"],
        subsample_seed=int(doc["subsample_seed"]),
        labels=None if labels is None else np.array(labels, dtype=np.int64),
    )
    model.members = _build_members(assignment, model.k)
    model.subsamples = [np.array(s, dtype=np.int64) for s in doc["subsamples"]]
    return model


def synthetic_cluster_model(
    k: int,
    dim: int = 8,
    points_per_cluster: int = 16,
    seed: int = 0,
    spread: float = 0.15,
    subsample_size: int = DEFAULT_SUBSAMPLE_SIZE,
    subsample_strategy: SubsampleStrategy = "furthest",
) -> ClusterModel:
    """A cluster model built from seeded Gaussian blobs, one per cluster.

    Used by desk-scale experiments where cluster structure is prescribed
    rather than discovered; assignments are exact by construction.
    """
    rng = derive_rng(seed, "synthetic-model")
    centroids = rng.uniform(-1.0, 1.0, size=(k, dim))
    rows = np.repeat(centroids, points_per_cluster, axis=0) + spread * rng.standard_normal(
        (k * points_per_cluster, dim)
    )
    assignment = np.repeat(np.arange(k, dtype=np.int64), points_per_cluster)
    embeddings = EmbeddingMatrix(rows=rows)
    # Recenter on the realized blob means so centroid invariants hold exactly.
    realized = np.vstack([rows[assignment == i].mean(axis=0) for i in range(k)])
    return _finish_model(
        embeddings,
        assignment,
        realized,
        subsample_size,
        subsample_strategy,
        derive_seed(seed, "subsample"),
        labels=None,
        inertia_history=[float(np.sum((rows - realized[assignment]) ** 2))],
        n_iterations=0,
    )
