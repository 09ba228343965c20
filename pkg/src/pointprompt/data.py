"""Synthetic dataset generation: clean shape classes, corruption sub-modes,
stratified splits, binary cloud files and the tab-separated manifest.

Every cloud derives its rng stream from (spec.seed, row index), so generation
is bit-reproducible and order-independent. Corruptions re-normalize their
output back onto the unit sphere and record their drawn parameters in the
cloud meta, which lets tests reconstruct the exact transformation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import PointCloud, normalize_points

SHAPE_KINDS = ("sphere", "cube", "cylinder", "cone", "torus", "plane",
               "capsule", "cross")
SUBMODES = ("clean", "crop_missing", "jitter_noise", "outlier_clutter")

CLOUD_MAGIC = b"PCLD"
CLOUD_VERSION = 1


@dataclass
class DatasetSpec:
    classes: tuple[str, ...] = SHAPE_KINDS
    per_class: int = 40          # samples per class per sub-mode
    points: int = 128            # M
    submodes: tuple[str, ...] = SUBMODES
    train_frac: float = 0.8
    seed: int = 0

    def __post_init__(self):
        self.classes = tuple(self.classes)
        self.submodes = tuple(self.submodes)
        if len(self.classes) < 2:
            raise ValueError("need at least 2 classes")
        unknown = set(self.classes) - set(SHAPE_KINDS)
        if unknown:
            raise ValueError(f"unknown shape kinds: {sorted(unknown)}")
        unknown = set(self.submodes) - set(SUBMODES)
        if unknown:
            raise ValueError(f"unknown sub-modes: {sorted(unknown)}")
        if self.points < 16:
            raise ValueError("points must be >= 16")
        if not 0.0 < self.train_frac < 1.0:
            raise ValueError("train_frac must be in (0, 1)")
        if self.per_class < 1:
            raise ValueError("per_class must be >= 1")


@dataclass
class ManifestRow:
    path: str
    class_id: int
    split: str
    submode: str
    seed: int


@dataclass
class DatasetSplit:
    points: np.ndarray            # (n, M, 3) float32
    labels: np.ndarray            # (n,) int64
    submodes: list[str]
    class_count: int
    rows: list[ManifestRow] = field(default_factory=list)

    def __len__(self) -> int:
        return self.points.shape[0]

    def subset(self, mask) -> "DatasetSplit":
        idx = np.flatnonzero(mask)
        return DatasetSplit(points=self.points[idx], labels=self.labels[idx],
                            submodes=[self.submodes[i] for i in idx],
                            class_count=self.class_count,
                            rows=[self.rows[i] for i in idx] if self.rows else [])


# ---------------------------------------------------------------------------
# shape samplers

def _unit_dirs_zero_mean(rng: np.random.Generator, n: int) -> np.ndarray:
    """Unit vectors whose sum is exactly zero (antipodal pairs, plus one
    balanced triple when n is odd), so spheres stay spheres after centering."""
    pairs = (n - 3) // 2 if n % 2 else n // 2
    d = rng.standard_normal((pairs, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    out = [d, -d]
    if n % 2:
        a = rng.standard_normal(3)
        a /= np.linalg.norm(a)
        b = rng.standard_normal(3)
        b -= a * (a @ b)
        b /= np.linalg.norm(b)
        ang = 2.0 * np.pi / 3.0
        out.append(np.stack([a,
                             a * np.cos(ang) + b * np.sin(ang),
                             a * np.cos(2 * ang) + b * np.sin(2 * ang)]))
    return np.concatenate(out, axis=0)


def _sample_sphere(rng, n):
    r = rng.uniform(0.6, 1.0)
    return r * _unit_dirs_zero_mean(rng, n)


def _sample_cube(rng, n):
    half = rng.uniform(0.6, 1.2, size=3)
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
    areas = np.repeat(areas, 2)  # +x, -x, +y, -y, +z, -z
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-1.0, 1.0, size=(n, 2))
    pts = np.empty((n, 3))
    for f in range(6):
        sel = face == f
        ax = f // 2
        sign = 1.0 if f % 2 == 0 else -1.0
        others = [i for i in range(3) if i != ax]
        pts[sel, ax] = sign * half[ax]
        pts[sel, others[0]] = u[sel, 0] * half[others[0]]
        pts[sel, others[1]] = u[sel, 1] * half[others[1]]
    return pts


def _sample_cylinder(rng, n, cap_sign=(1.0, -1.0)):
    r = rng.uniform(0.3, 0.7)
    h = rng.uniform(1.0, 2.0)
    lateral = 2 * np.pi * r * h
    cap = np.pi * r * r
    weights = np.array([lateral] + [cap] * len(cap_sign))
    part = rng.choice(len(weights), size=n, p=weights / weights.sum())
    theta = rng.uniform(0.0, 2 * np.pi, size=n)
    pts = np.empty((n, 3))
    lat = part == 0
    pts[lat, 0] = r * np.cos(theta[lat])
    pts[lat, 1] = r * np.sin(theta[lat])
    pts[lat, 2] = rng.uniform(-h / 2, h / 2, size=int(lat.sum()))
    for ci, sign in enumerate(cap_sign, start=1):
        sel = part == ci
        rho = r * np.sqrt(rng.uniform(0.0, 1.0, size=int(sel.sum())))
        pts[sel, 0] = rho * np.cos(theta[sel])
        pts[sel, 1] = rho * np.sin(theta[sel])
        pts[sel, 2] = sign * h / 2
    return pts


def _sample_cone(rng, n):
    r = rng.uniform(0.4, 0.8)
    h = rng.uniform(1.0, 2.0)
    lateral = np.pi * r * np.sqrt(r * r + h * h)
    base = np.pi * r * r
    take_lat = rng.uniform(size=n) < lateral / (lateral + base)
    theta = rng.uniform(0.0, 2 * np.pi, size=n)
    s = np.sqrt(rng.uniform(size=n))  # area density grows away from the apex
    pts = np.empty((n, 3))
    pts[take_lat, 0] = s[take_lat] * r * np.cos(theta[take_lat])
    pts[take_lat, 1] = s[take_lat] * r * np.sin(theta[take_lat])
    pts[take_lat, 2] = h * (1.0 - s[take_lat])
    rest = ~take_lat
    pts[rest, 0] = s[rest] * r * np.cos(theta[rest])
    pts[rest, 1] = s[rest] * r * np.sin(theta[rest])
    pts[rest, 2] = 0.0
    return pts


def _sample_torus(rng, n):
    rr = 1.0
    rm = rng.uniform(0.15, 0.35)
    u = rng.uniform(0.0, 2 * np.pi, size=n)
    v = np.empty(n)
    filled = 0
    while filled < n:  # rejection keeps the surface density uniform
        cand = rng.uniform(0.0, 2 * np.pi, size=2 * (n - filled))
        acc = rng.uniform(size=cand.size) < (rr + rm * np.cos(cand)) / (rr + rm)
        take = cand[acc][:n - filled]
        v[filled:filled + take.size] = take
        filled += take.size
    ring = rr + rm * np.cos(v)
    return np.stack([ring * np.cos(u), ring * np.sin(u), rm * np.sin(v)], axis=1)


def _sample_plane(rng, n):
    a = rng.uniform(0.5, 2.0)
    pts = np.zeros((n, 3))
    pts[:, 0] = rng.uniform(-a, a, size=n)
    pts[:, 1] = rng.uniform(-1.0, 1.0, size=n)
    return pts


def _sample_capsule(rng, n):
    r = rng.uniform(0.25, 0.5)
    hh = rng.uniform(0.4, 0.8)  # cylinder half-height
    lateral = 2 * np.pi * r * (2 * hh)
    caps = 4 * np.pi * r * r
    on_caps = rng.uniform(size=n) < caps / (lateral + caps)
    pts = np.empty((n, 3))
    nc = int(on_caps.sum())
    d = rng.standard_normal((nc, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    pts[on_caps] = r * d
    pts[on_caps, 2] += np.where(d[:, 2] > 0, hh, -hh)
    lat = ~on_caps
    theta = rng.uniform(0.0, 2 * np.pi, size=int(lat.sum()))
    pts[lat, 0] = r * np.cos(theta)
    pts[lat, 1] = r * np.sin(theta)
    pts[lat, 2] = rng.uniform(-hh, hh, size=int(lat.sum()))
    return pts


def _sample_cross(rng, n):
    s = rng.uniform(0.15, 0.3)   # arm half-thickness
    length = 1.0
    half_a = np.array([length, s, s])
    half_b = np.array([s, length, s])

    def inside(pts, half):
        return np.all(np.abs(pts) < half - 1e-9, axis=1)

    pts = np.empty((0, 3))
    while pts.shape[0] < n:
        want = n - pts.shape[0]
        pick_a = rng.uniform(size=want) < 0.5
        cand = np.empty((want, 3))
        for which, half in ((pick_a, half_a), (~pick_a, half_b)):
            cnt = int(which.sum())
            if cnt == 0:
                continue
            sub_rng_pts = _sample_box_surface(rng, cnt, half)
            cand[which] = sub_rng_pts
        other = np.where(pick_a[:, None], half_b[None, :], half_a[None, :])
        keep = ~np.all(np.abs(cand) < other - 1e-9, axis=1)
        pts = np.concatenate([pts, cand[keep]], axis=0)
    return pts[:n]


def _sample_box_surface(rng, n, half):
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
    areas = np.repeat(areas, 2)
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-1.0, 1.0, size=(n, 2))
    pts = np.empty((n, 3))
    for f in range(6):
        sel = face == f
        ax = f // 2
        sign = 1.0 if f % 2 == 0 else -1.0
        others = [i for i in range(3) if i != ax]
        pts[sel, ax] = sign * half[ax]
        pts[sel, others[0]] = u[sel, 0] * half[others[0]]
        pts[sel, others[1]] = u[sel, 1] * half[others[1]]
    return pts


_SAMPLERS = {
    "sphere": _sample_sphere,
    "cube": _sample_cube,
    "cylinder": _sample_cylinder,
    "cone": _sample_cone,
    "torus": _sample_torus,
    "plane": _sample_plane,
    "capsule": _sample_capsule,
    "cross": _sample_cross,
}


def generate_shape(kind: str, m: int, rng: np.random.Generator) -> PointCloud:
    """Sample M surface points of one shape instance, unit-sphere normalized."""
    if kind not in _SAMPLERS:
        raise ValueError(f"unknown shape kind: {kind!r}")
    if m < 16:
        raise ValueError("need at least 16 points")
    pts = _SAMPLERS[kind](rng, m)
    return PointCloud(points=normalize_points(pts), meta={"kind": kind})


# ---------------------------------------------------------------------------
# corruption sub-modes

def corrupt(cloud: PointCloud, submode: str, rng: np.random.Generator) -> PointCloud:
    """Derive one corrupted variant; output is re-normalized and keeps M points.

    The rng draw order per sub-mode is part of the contract (tests replay it):
    crop_missing: q, mode flag, direction/center, fill indices;
    jitter_noise: sigma, then the (M, 3) normal noise;
    outlier_clutter: fraction, victim indices, directions, radii.
    """
    if submode not in SUBMODES:
        raise ValueError(f"unknown sub-mode: {submode!r}")
    pts = cloud.points.astype(np.float64)
    m = pts.shape[0]
    meta = dict(cloud.meta)
    meta["submode"] = submode

    if submode == "clean":
        return PointCloud(points=cloud.points.copy(), label=cloud.label, meta=meta)

    if submode == "crop_missing":
        q = float(rng.uniform(0.2, 0.4))
        n_cut = int(round(q * m))
        use_halfspace = rng.uniform() < 0.5
        if use_halfspace:
            direction = rng.standard_normal(3)
            direction /= np.linalg.norm(direction)
            score = pts @ direction
        else:
            center = pts[int(rng.integers(m))]
            score = -((pts - center) ** 2).sum(axis=1)  # nearest removed first
        order = np.argsort(-score, kind="stable")
        removed = np.sort(order[:n_cut])
        kept = np.sort(order[n_cut:])
        fill = kept[rng.integers(0, kept.size, size=n_cut)]
        source_rows = np.concatenate([kept, fill])
        out = normalize_points(pts[source_rows])
        meta["crop"] = {"q": q, "halfspace": bool(use_halfspace),
                        "removed": removed, "source_rows": source_rows}
        return PointCloud(points=out, label=cloud.label, meta=meta)

    if submode == "jitter_noise":
        sigma = float(rng.uniform(0.02, 0.05))
        noise = rng.normal(0.0, sigma, size=pts.shape)
        out = normalize_points(pts + noise)
        meta["jitter"] = {"sigma": sigma}
        return PointCloud(points=out, label=cloud.label, meta=meta)

    # outlier_clutter: replace a slice of points with uniform unit-ball clutter
    frac = float(rng.uniform(0.1, 0.2))
    n_out = int(round(frac * m))
    victims = rng.choice(m, size=n_out, replace=False)
    dirs = rng.standard_normal((n_out, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = rng.uniform(size=n_out) ** (1.0 / 3.0)
    pts[victims] = dirs * radii[:, None]
    out = normalize_points(pts)
    meta["outliers"] = {"fraction": frac, "indices": np.sort(victims)}
    return PointCloud(points=out, label=cloud.label, meta=meta)


# ---------------------------------------------------------------------------
# files and manifest

def save_cloud(path: Path, points: np.ndarray) -> None:
    pts = np.ascontiguousarray(points, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", CLOUD_MAGIC, CLOUD_VERSION, pts.shape[0]))
        fh.write(pts.tobytes())


def load_cloud(path: Path) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read cloud file {path}: {exc}") from exc
    if len(raw) < 12:
        raise ValueError(f"{path}: truncated cloud file")
    magic, version, count = struct.unpack_from("<4sII", raw)
    if magic != CLOUD_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != CLOUD_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    body = raw[12:]
    if len(body) != count * 12:
        raise ValueError(f"{path}: expected {count} points, file is truncated")
    return np.frombuffer(body, dtype="<f4").reshape(count, 3).copy()


MANIFEST_HEADER = "path\tclass_id\tsplit\tsubmode\tseed"


def write_manifest(path: Path, rows: list[ManifestRow]) -> None:
    lines = [MANIFEST_HEADER]
    lines += [f"{r.path}\t{r.class_id}\t{r.split}\t{r.submode}\t{r.seed}"
              for r in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path: Path) -> list[ManifestRow]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read manifest {path}: {exc}") from exc
    lines = [ln for ln in text.splitlines() if ln]
    if not lines or lines[0] != MANIFEST_HEADER:
        raise ValueError(f"{path}: missing or malformed manifest header")
    rows = []
    for ln in lines[1:]:
        parts = ln.split("\t")
        if len(parts) != 5:
            raise ValueError(f"{path}: malformed manifest row: {ln!r}")
        rows.append(ManifestRow(path=parts[0], class_id=int(parts[1]),
                                split=parts[2], submode=parts[3],
                                seed=int(parts[4])))
    return rows


def _row_seed(spec_seed: int, row_index: int) -> int:
    return int(np.random.SeedSequence((spec_seed, row_index)).generate_state(1)[0])


def build_dataset(spec: DatasetSpec, out_dir) -> list[ManifestRow]:
    """Generate every (class, sub-mode) cell, write clouds + manifest, return rows.

    The train/test split is stratified per (class, sub-mode) cell; membership
    comes from a cell-local shuffle seeded by spec.seed, so the whole dataset
    is a pure function of the spec.
    """
    out = Path(out_dir)
    cloud_dir = out / "clouds"
    cloud_dir.mkdir(parents=True, exist_ok=True)
    rows: list[ManifestRow] = []
    row_index = 0
    for class_id, kind in enumerate(spec.classes):
        for sub_i, submode in enumerate(spec.submodes):
            n_test = int(round((1.0 - spec.train_frac) * spec.per_class))
            cell_rng = np.random.default_rng((spec.seed, class_id, sub_i, 12345))
            test_slots = set(cell_rng.permutation(spec.per_class)[:n_test].tolist())
            for j in range(spec.per_class):
                seed = _row_seed(spec.seed, row_index)
                rng = np.random.default_rng(seed)
                cloud = corrupt(generate_shape(kind, spec.points, rng), submode, rng)
                rel = f"clouds/{kind}_{submode}_{j:03d}.pcld"
                try:
                    save_cloud(out / rel, cloud.points)
                except OSError as exc:
                    raise OSError(f"cannot write {out / rel}: {exc}") from exc
                split = "test" if j in test_slots else "train"
                rows.append(ManifestRow(path=rel, class_id=class_id, split=split,
                                        submode=submode, seed=seed))
                row_index += 1
    write_manifest(out / "manifest.tsv", rows)
    return rows


def load_split(dataset_dir, split: str = "train") -> DatasetSplit:
    """Load all clouds of one split ("train", "test" or "all") into memory."""
    base = Path(dataset_dir)
    rows = read_manifest(base / "manifest.tsv")
    if split != "all":
        rows = [r for r in rows if r.split == split]
    if not rows:
        raise ValueError(f"no rows for split {split!r} in {base}")
    pts = np.stack([load_cloud(base / r.path) for r in rows])
    labels = np.array([r.class_id for r in rows], dtype=np.int64)
    class_count = int(max(r.class_id for r in read_manifest(base / "manifest.tsv"))) + 1
    return DatasetSplit(points=pts, labels=labels,
                        submodes=[r.submode for r in rows],
                        class_count=class_count, rows=rows)


def few_shot_split(labels, n_way: int, m_shot: int, queries: int,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Sample one episode: indices of n_way*m_shot supports and n_way*queries
    query items, disjoint, classes drawn without replacement."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if classes.size < n_way:
        raise ValueError(f"need {n_way} classes, dataset has {classes.size}")
    chosen = rng.choice(classes, size=n_way, replace=False)
    support, query = [], []
    for c in chosen:
        idx = np.flatnonzero(labels == c)
        if idx.size < m_shot + queries:
            raise ValueError(f"class {c} has {idx.size} samples, "
                             f"needs {m_shot + queries}")
        perm = rng.permutation(idx)
        support.append(perm[:m_shot])
        query.append(perm[m_shot:m_shot + queries])
    return np.concatenate(support), np.concatenate(query)
