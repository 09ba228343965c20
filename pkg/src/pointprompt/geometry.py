"""Point-cloud sampling, grouping, distance and augmentation kernels.

Everything here is plain numpy (no autodiff); brute-force O(N^2) distance
work is fine at the cloud sizes this lab uses. All functions are pure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class PointCloud:
    """M x 3 coordinates with optional class label and provenance tags."""

    points: np.ndarray
    label: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float32)
        if self.points.ndim != 2 or self.points.shape[1] != 3 or self.points.shape[0] < 1:
            raise ValueError(f"points must be (M, 3) with M >= 1, got {self.points.shape}")
        if not np.isfinite(self.points).all():
            raise ValueError("points contain non-finite coordinates")

    @property
    def size(self) -> int:
        return self.points.shape[0]


def normalize_points(points: np.ndarray) -> np.ndarray:
    """Center on the centroid and scale the farthest point onto the unit sphere."""
    pts = np.asarray(points, dtype=np.float64)
    pts = pts - pts.mean(axis=0, keepdims=True)
    r = np.linalg.norm(pts, axis=1).max()
    if r > 0:
        pts = pts / r
    return pts.astype(np.float32)


@dataclass
class PatchSet:
    """m patch centers plus m x k center-relative local groups."""

    centers: np.ndarray        # (m, 3)
    groups: np.ndarray         # (m, k, 3), row i translated by -centers[i]
    source_indices: np.ndarray  # (m, k) indices into the source cloud


def _pairwise_sq_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[..., :, None, :] - b[..., None, :, :]
    return np.einsum("...ijk,...ijk->...ij", diff, diff)


def farthest_point_sample(cloud: PointCloud, m: int, start: int = 0) -> np.ndarray:
    """Greedy subset of m indices maximizing min distance to chosen points.

    Ties break to the lowest index; deterministic given `start`.
    """
    pts = cloud.points.astype(np.float64)
    n = pts.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"m={m} outside [1, {n}]")
    if not 0 <= start < n:
        raise ValueError(f"start={start} outside [0, {n})")
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = start
    min_d = ((pts - pts[start]) ** 2).sum(axis=1)
    min_d[start] = -1.0  # selected points never win argmax
    for i in range(1, m):
        nxt = int(np.argmax(min_d))
        chosen[i] = nxt
        d = ((pts - pts[nxt]) ** 2).sum(axis=1)
        np.minimum(min_d, d, out=min_d)
        min_d[nxt] = -1.0
    return chosen


def fps_batch(points: np.ndarray, m: int, start: int = 0) -> np.ndarray:
    """Vectorized farthest-point sampling over a (B, M, 3) stack."""
    pts = np.asarray(points, dtype=np.float64)
    b, n, _ = pts.shape
    if not 1 <= m <= n:
        raise ValueError(f"m={m} outside [1, {n}]")
    rows = np.arange(b)
    chosen = np.empty((b, m), dtype=np.int64)
    chosen[:, 0] = start
    cur = pts[rows, start]
    min_d = ((pts - cur[:, None, :]) ** 2).sum(axis=2)
    min_d[rows, start] = -1.0
    for i in range(1, m):
        nxt = np.argmax(min_d, axis=1)
        chosen[:, i] = nxt
        cur = pts[rows, nxt]
        np.minimum(min_d, ((pts - cur[:, None, :]) ** 2).sum(axis=2), out=min_d)
        min_d[rows, nxt] = -1.0
    return chosen


def knn(queries: np.ndarray, reference: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest reference rows per query, ascending distance.

    Ties break to the lowest reference index, so a query that also appears in
    the reference set returns itself first.
    """
    q = np.asarray(queries, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    if k > r.shape[0]:
        raise ValueError(f"k={k} exceeds reference size {r.shape[0]}")
    d = _pairwise_sq_dist(q, r)
    order = np.argsort(d, axis=-1, kind="stable")
    return order[..., :k]


def knn_batch(queries: np.ndarray, reference: np.ndarray, k: int) -> np.ndarray:
    """knn over matching (B, Q, D) and (B, R, D) stacks."""
    if k > reference.shape[1]:
        raise ValueError(f"k={k} exceeds reference size {reference.shape[1]}")
    d = _pairwise_sq_dist(np.asarray(queries, dtype=np.float64),
                          np.asarray(reference, dtype=np.float64))
    return np.argsort(d, axis=-1, kind="stable")[..., :k]


def group_patches(cloud: PointCloud, m: int, k: int) -> PatchSet:
    """Split a cloud into m patches of k nearest neighbors around FPS centers.

    Groups are translated so each patch center sits at the origin; within a
    group, points are ordered by ascending distance to the center.
    """
    if k > cloud.size:
        raise ValueError(f"k={k} exceeds cloud size {cloud.size}")
    centers_idx = farthest_point_sample(cloud, m, start=0)
    centers = cloud.points[centers_idx]
    idx = knn(centers, cloud.points, k)
    groups = cloud.points[idx] - centers[:, None, :]
    return PatchSet(centers=centers, groups=groups.astype(np.float32),
                    source_indices=idx)


def group_patches_batch(points: np.ndarray, m: int, k: int):
    """Batched grouping for a (B, M, 3) stack; returns (centers, groups)."""
    if k > points.shape[1]:
        raise ValueError(f"k={k} exceeds cloud size {points.shape[1]}")
    b = points.shape[0]
    cidx = fps_batch(points, m, start=0)
    centers = points[np.arange(b)[:, None], cidx]
    nidx = knn_batch(centers, points, k)
    groups = points[np.arange(b)[:, None, None], nidx] - centers[:, :, None, :]
    return centers.astype(np.float32), groups.astype(np.float32)


def chamfer(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric mean of squared nearest-neighbor distances between two sets."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("chamfer distance of an empty point set")
    d = _pairwise_sq_dist(a, b)
    return float(d.min(axis=1).mean() + d.min(axis=0).mean())


# ---------------------------------------------------------------------------
# augmentation

AUGMENT_OPS = ("rotate_z", "rotate_so3", "scale", "translate", "jitter")

SCALE_RANGE = (0.8, 1.25)
TRANSLATE_RANGE = 0.1
JITTER_SIGMA = 0.01
JITTER_CLIP = 0.05


def _rotation_z(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _rotation_so3(rng: np.random.Generator) -> np.ndarray:
    # uniform rotation from a normalized random quaternion
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def augment(cloud: PointCloud, spec, rng: np.random.Generator) -> PointCloud:
    """Apply the selected augmentations with rng-drawn parameters.

    `spec` is any iterable drawn from AUGMENT_OPS; ops apply in the canonical
    AUGMENT_OPS order regardless of the iterable's order, so the rng stream is
    reproducible. Drawn parameters land in the output meta under "augment".
    """
    ops = set(spec or ())
    unknown = ops - set(AUGMENT_OPS)
    if unknown:
        raise ValueError(f"unknown augmentation ops: {sorted(unknown)}")
    pts = cloud.points.astype(np.float64)
    record = {}
    if "rotate_z" in ops:
        theta = float(rng.uniform(0.0, 2.0 * np.pi))
        pts = pts @ _rotation_z(theta).T
        record["rotate_z"] = theta
    if "rotate_so3" in ops:
        rot = _rotation_so3(rng)
        pts = pts @ rot.T
        record["rotate_so3"] = rot
    if "scale" in ops:
        f = float(rng.uniform(*SCALE_RANGE))
        pts = pts * f
        record["scale"] = f
    if "translate" in ops:
        off = rng.uniform(-TRANSLATE_RANGE, TRANSLATE_RANGE, size=3)
        pts = pts + off
        record["translate"] = off
    if "jitter" in ops:
        noise = np.clip(rng.normal(0.0, JITTER_SIGMA, size=pts.shape),
                        -JITTER_CLIP, JITTER_CLIP)
        pts = pts + noise
        record["jitter_sigma"] = JITTER_SIGMA
    meta = dict(cloud.meta)
    if record:
        meta["augment"] = record
    return PointCloud(points=pts.astype(np.float32), label=cloud.label, meta=meta)


def augment_batch(points: np.ndarray, spec, rng: np.random.Generator) -> np.ndarray:
    """Apply `augment` independently to each cloud of a (B, M, 3) stack."""
    out = np.empty_like(points)
    for i in range(points.shape[0]):
        out[i] = augment(PointCloud(points[i]), spec, rng).points
    return out
