"""Point clouds, nearest-neighbour queries, sampling and the pinhole camera."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SINGULAR_EPS = 1e-8


@dataclass
class PointCloud:
    positions: np.ndarray
    features: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float32).reshape(-1, 3)
        if len(self.positions) < 1:
            raise ValueError("point cloud needs at least one point")
        if not np.isfinite(self.positions).all():
            raise ValueError("point positions must be finite")
        if self.features is not None:
            f = np.asarray(self.features, dtype=np.float32)
            if f.ndim == 1:
                f = f[:, None]
            if len(f) != len(self.positions):
                raise ValueError(f"{len(f)} feature rows for {len(self.positions)} points")
            self.features = np.ascontiguousarray(f)

    @property
    def n(self) -> int:
        return len(self.positions)

    @property
    def has_colors(self) -> bool:
        return self.features is not None and self.features.shape[1] == 3

    def subset(self, idx: np.ndarray) -> "PointCloud":
        feats = None if self.features is None else self.features[idx]
        return PointCloud(self.positions[idx], feats)


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if np.abs(self.rotation @ self.rotation.T - np.eye(3)).max() > 1e-5:
            raise ValueError("rotation is not orthonormal")

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def normalized(self, center: np.ndarray, scale: float) -> "Camera":
        """The same view of a cloud mapped by ``p -> (p - center) / scale``."""
        t = (self.rotation @ np.asarray(center, dtype=np.float64) + self.translation) / scale
        return Camera(self.fx, self.fy, self.cx, self.cy, self.width, self.height, self.rotation, t)

    def to_dict(self) -> dict:
        return {
            "fx": float(self.fx), "fy": float(self.fy), "cx": float(self.cx), "cy": float(self.cy),
            "width": int(self.width), "height": int(self.height),
            "rotation": [float(v) for v in self.rotation.reshape(-1)],
            "translation": [float(v) for v in self.translation],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], int(d["width"]), int(d["height"]),
                   np.array(d["rotation"]).reshape(3, 3), np.array(d["translation"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "Camera":
        return cls.from_dict(json.loads(Path(path).read_text()))


def bounding_sphere_radius(positions) -> float:
    """Largest distance from the centroid (not the minimal enclosing sphere)."""
    p = np.asarray(positions.positions if isinstance(positions, PointCloud) else positions,
                   dtype=np.float64)
    if len(p) == 0:
        raise ValueError("empty point set")
    return float(np.sqrt(((p - p.mean(axis=0)) ** 2).sum(axis=1).max()))


# nearest neighbours


def _sqdist(q: np.ndarray, p: np.ndarray) -> np.ndarray:
    d = q[:, None, :] - p[None, :, :]
    return (d * d).sum(axis=-1)


def _smallest_k(sqd: np.ndarray, k: int) -> np.ndarray:
    """Column indices of the k smallest entries per row, ties to the lower column."""
    m, n = sqd.shape
    if k == n:
        return np.argsort(sqd, axis=1, kind="stable")
    kth = np.partition(sqd, k - 1, axis=1)[:, k - 1:k]
    rows, cols = np.nonzero(sqd <= kth)
    order = np.lexsort((cols, sqd[rows, cols], rows))
    rows, cols = rows[order], cols[order]
    starts = np.searchsorted(rows, np.arange(m))
    take = starts[:, None] + np.arange(k)[None, :]
    return cols[take]


def knn_brute(points: np.ndarray, queries: np.ndarray, k: int, chunk: int = 1024):
    """Exhaustive k nearest neighbours: ``(indices (M, k), distances (M, k))``."""
    p = np.asarray(points, dtype=np.float64)
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    if k > len(p):
        raise ValueError(f"k={k} exceeds the {len(p)} indexed points")
    if k < 1:
        raise ValueError("k must be at least 1")
    idx = np.empty((len(q), k), dtype=np.int64)
    dist = np.empty((len(q), k), dtype=np.float64)
    for s in range(0, len(q), chunk):
        sqd = _sqdist(q[s:s + chunk], p)
        sel = _smallest_k(sqd, k)
        idx[s:s + chunk] = sel
        dist[s:s + chunk] = np.sqrt(np.take_along_axis(sqd, sel, axis=1))
    return idx, dist


class KnnIndex:
    """Uniform hash grid over a fixed point set.

    The default cell edge is bounding-sphere radius / cbrt(N), which keeps
    roughly one point per occupied cell on volumetric data.
    """

    def __init__(self, positions, cell_size: float | None = None):
        self.points = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.points)
        if n == 0:
            raise ValueError("cannot index an empty point set")
        if cell_size is None:
            r = bounding_sphere_radius(self.points)
            cell_size = r / np.cbrt(n) if r > 0 else 1.0
        self.cell_size = float(cell_size)
        self.origin = self.points.min(axis=0)
        cells = np.floor((self.points - self.origin) / self.cell_size).astype(np.int64)
        self.extent = cells.max(axis=0)
        self._cells: dict[tuple, np.ndarray] = {}
        order = np.lexsort((np.arange(n), cells[:, 2], cells[:, 1], cells[:, 0]))
        keys = cells[order]
        bounds = np.flatnonzero(np.any(np.diff(keys, axis=0) != 0, axis=1)) + 1
        for chunk in np.split(order, bounds):
            self._cells[tuple(cells[chunk[0]])] = np.sort(chunk)

    def __len__(self) -> int:
        return len(self.points)

    def _ring(self, c: np.ndarray, r: int):
        lo, hi = c - r, c + r
        for i in range(lo[0], hi[0] + 1):
            for j in range(lo[1], hi[1] + 1):
                edge = i in (lo[0], hi[0]) or j in (lo[1], hi[1])
                ks = range(lo[2], hi[2] + 1) if edge else (lo[2], hi[2])
                for k in ks:
                    hit = self._cells.get((i, j, k))
                    if hit is not None:
                        yield hit

    def query_one(self, q: np.ndarray, k: int):
        c = np.floor((q - self.origin) / self.cell_size).astype(np.int64)
        # rings beyond this cover no occupied cell
        r_max = int(max(np.abs(c).max(), np.abs(c - self.extent).max()))
        cand: list[np.ndarray] = []
        count, r = 0, 0
        while True:
            for hit in self._ring(c, r) if r else [self._cells.get(tuple(c), np.empty(0, np.int64))]:
                cand.append(hit)
                count += len(hit)
            if count >= k:
                ids = np.concatenate(cand)
                sqd = _sqdist(q[None, :], self.points[ids])[0]
                kth = np.partition(sqd, k - 1)[k - 1]
                # anything outside ring r is at least r cells away
                if r >= r_max or np.sqrt(kth) < r * self.cell_size:
                    order = np.lexsort((ids, sqd))[:k]
                    return ids[order], np.sqrt(sqd[order])
            if r >= r_max:
                raise AssertionError("grid exhausted before k neighbours were found")
            r += 1


def knn_query(index: KnnIndex, queries, k: int):
    """k nearest indexed points per query, ascending by distance, ties by index."""
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    if k > len(index):
        raise ValueError(f"k={k} exceeds the {len(index)} indexed points")
    if k < 1:
        raise ValueError("k must be at least 1")
    idx = np.empty((len(q), k), dtype=np.int64)
    dist = np.empty((len(q), k), dtype=np.float64)
    for i, row in enumerate(q):
        idx[i], dist[i] = index.query_one(row, k)
    return idx, dist


# interpolation


def idw_weights(source_positions, targets, k: int):
    """Neighbour indices and normalised inverse-square-distance weights.

    A target closer than 1e-8 to a source point takes that point's value
    outright instead of dividing by a vanishing distance.
    """
    src = np.asarray(source_positions)
    if len(src) == 0:
        raise ValueError("interpolation source is empty")
    idx, dist = knn_brute(src, targets, k)
    near = dist < SINGULAR_EPS
    w = 1.0 / np.maximum(dist, SINGULAR_EPS) ** 2
    hit = near.any(axis=1)
    if hit.any():
        first = np.argmax(near[hit], axis=1)
        w[hit] = 0.0
        w[np.flatnonzero(hit), first] = 1.0
    w /= w.sum(axis=1, keepdims=True)
    return idx, w


def inverse_distance_interpolate(source: PointCloud, targets, k: int = 4) -> np.ndarray:
    if source.features is None:
        raise ValueError("interpolation source carries no features")
    idx, w = idw_weights(source.positions, targets, k)
    return np.einsum("mk,mkc->mc", w, source.features[idx].astype(np.float64))


# sampling


def fps_sample(positions, m: int, rng: np.random.Generator | None = None,
               start: int | None = None) -> np.ndarray:
    """Greedy farthest-point subset of size ``m``.

    The first index is ``start`` when given, otherwise drawn from ``rng``.
    Ties go to the lower index.
    """
    p = np.asarray(positions.positions if isinstance(positions, PointCloud) else positions,
                   dtype=np.float64)
    n = len(p)
    if not 1 <= m <= n:
        raise ValueError(f"cannot sample {m} of {n} points")
    if start is None:
        start = 0 if rng is None else int(rng.integers(n))
    out = np.empty(m, dtype=np.int64)
    out[0] = start
    best = ((p - p[start]) ** 2).sum(axis=1)
    for i in range(1, m):
        nxt = int(np.argmax(best))
        out[i] = nxt
        np.minimum(best, ((p - p[nxt]) ** 2).sum(axis=1), out=best)
    return out


def canonical_start(positions) -> int:
    """Point farthest from the centroid; independent of point order."""
    p = np.asarray(positions, dtype=np.float64)
    return int(np.argmax(((p - p.mean(axis=0)) ** 2).sum(axis=1)))


# camera


def project_points(camera: Camera, positions):
    """Pixel coordinates ``(N, 2)``, camera depth ``(N,)`` and in-frustum flags."""
    p = positions.positions if isinstance(positions, PointCloud) else positions
    pc = camera.to_camera(p)
    z = pc[:, 2]
    safe = np.where(z > 0, z, 1.0)
    u = camera.fx * pc[:, 0] / safe + camera.cx
    v = camera.fy * pc[:, 1] / safe + camera.cy
    inside = (z > 0) & (u >= 0) & (u < camera.width) & (v >= 0) & (v < camera.height)
    return np.stack([u, v], axis=1), z, inside


def _disc_offsets(radius_px: float) -> np.ndarray:
    r = int(np.floor(radius_px))
    d = np.arange(-r, r + 1)
    dx, dy = np.meshgrid(d, d, indexing="xy")
    keep = dx * dx + dy * dy <= radius_px * radius_px
    return np.stack([dx[keep], dy[keep]], axis=1)


def zbuffer(camera: Camera, positions, radius_px: float = 2.0):
    """Splat in-frustum points as discs; returns per-pixel min depth and winner.

    Pixels nobody covers hold ``inf`` depth and winner ``-1``.  Equal depths go
    to the lower point index.
    """
    uv, z, inside = project_points(camera, positions)
    h, w = camera.height, camera.width
    depth = np.full(h * w, np.inf)
    owner = np.full(h * w, -1, dtype=np.int64)
    ids = np.flatnonzero(inside)
    if len(ids) == 0:
        return depth.reshape(h, w), owner.reshape(h, w)
    px = np.floor(uv[ids]).astype(np.int64)
    off = _disc_offsets(radius_px)
    cx = (px[:, None, 0] + off[None, :, 0]).reshape(-1)
    cy = (px[:, None, 1] + off[None, :, 1]).reshape(-1)
    pid = np.repeat(ids, len(off))
    ok = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
    flat, pid = (cy * w + cx)[ok], pid[ok]
    order = np.lexsort((pid, z[pid], flat))
    flat, pid = flat[order], pid[order]
    first = np.ones(len(flat), dtype=bool)
    first[1:] = flat[1:] != flat[:-1]
    depth[flat[first]] = z[pid[first]]
    owner[flat[first]] = pid[first]
    return depth.reshape(h, w), owner.reshape(h, w)


def visibility_mask(camera: Camera, positions, radius_px: float = 2.0,
                    depth_tol: float | None = None) -> np.ndarray:
    """True where a point is no deeper than the z-buffer at its own pixel (+ tol)."""
    if radius_px <= 0:
        raise ValueError("radius_px must be positive")
    p = positions.positions if isinstance(positions, PointCloud) else np.asarray(positions)
    if depth_tol is None:
        depth_tol = 0.01 * bounding_sphere_radius(p)
    depth, _ = zbuffer(camera, p, radius_px)
    uv, z, inside = project_points(camera, p)
    vis = np.zeros(len(p), dtype=bool)
    ids = np.flatnonzero(inside)
    px = np.floor(uv[ids]).astype(np.int64)
    vis[ids] = z[ids] <= depth[px[:, 1], px[:, 0]] + depth_tol
    return vis


def bilinear_taps(uv: np.ndarray, height: int, width: int):
    """Flattened pixel indices ``(N, 4)`` and weights ``(N, 4)`` for bilinear lookup.

    Pixel ``(i, j)`` has its centre at ``(j + 0.5, i + 0.5)``; samples clamp at
    the border.
    """
    x = np.clip(uv[:, 0] - 0.5, 0, width - 1)
    y = np.clip(uv[:, 1] - 0.5, 0, height - 1)
    x0 = np.minimum(np.floor(x).astype(np.int64), width - 1)
    y0 = np.minimum(np.floor(y).astype(np.int64), height - 1)
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    fx, fy = x - x0, y - y0
    idx = np.stack([y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1], axis=1)
    w = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
    return idx, w


# PLY


def write_ply(path, cloud: PointCloud) -> None:
    colors = cloud.has_colors
    lines = ["ply", "format ascii 1.0", f"element vertex {cloud.n}",
             "property float x", "property float y", "property float z"]
    if colors:
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    lines.append("end_header")
    if colors:
        rgb = np.clip(np.rint(cloud.features * 255.0), 0, 255).astype(np.int64)
        body = [f"{x:.6g} {y:.6g} {z:.6g} {r} {g} {b}"
                for (x, y, z), (r, g, b) in zip(cloud.positions.tolist(), rgb.tolist())]
    else:
        body = [f"{x:.6g} {y:.6g} {z:.6g}" for x, y, z in cloud.positions.tolist()]
    Path(path).write_text("\n".join(lines + body) + "\n")


def read_ply(path) -> PointCloud:
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file")
    props: list[str] = []
    n = None
    i = 1
    while i < len(text) and text[i].strip() != "end_header":
        parts = text[i].split()
        if parts[:1] == ["format"] and parts[1] != "ascii":
            raise ValueError(f"{path}: only ASCII PLY is supported")
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        elif parts[:1] == ["property"] and n is not None:
            props.append(parts[-1])
        i += 1
    if n is None or i == len(text):
        raise ValueError(f"{path}: malformed PLY header")
    rows = np.array([ln.split() for ln in text[i + 1:i + 1 + n]], dtype=np.float64).reshape(n, -1)
    col = {name: j for j, name in enumerate(props)}
    pos = rows[:, [col["x"], col["y"], col["z"]]]
    feats = None
    if all(c in col for c in ("red", "green", "blue")):
        feats = rows[:, [col["red"], col["green"], col["blue"]]] / 255.0
    return PointCloud(pos, feats)
