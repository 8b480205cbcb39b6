"""Synthetic scenes and the defects applied to them: holes, sparsity, noise, lost colour."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import geometry as geo
from .geometry import Camera, PointCloud
from .numerics import RngStreams

SCENE_KINDS = ("cube", "sphere-shell", "two-room", "checker-terrain")


@dataclass(frozen=True)
class DegradationSpec:
    remove_fraction: float = 0.0
    patch_count: int = 3
    keep_ratio: float = 1.0
    noise_level: float = 0.0
    strip_color: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.remove_fraction < 1:
            raise ValueError(f"remove_fraction must lie in [0, 1), got {self.remove_fraction}")
        if self.patch_count < 1:
            raise ValueError("patch_count must be at least 1")
        if not 0 < self.keep_ratio <= 1:
            raise ValueError(f"keep_ratio must lie in (0, 1], got {self.keep_ratio}")
        if not 0 <= self.noise_level <= 0.05:
            raise ValueError(f"noise_level must lie in [0, 0.05], got {self.noise_level}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationSpec":
        names = {f.name for f in fields(cls)}
        extra = set(d) - names
        if extra:
            raise ValueError(f"unknown degradation keys: {sorted(extra)}")
        return cls(**d)


TASK_SPECS = {
    "completion": dict(remove_fraction=0.5),
    "upsampling": dict(keep_ratio=1 / 8),
    "denoising": dict(noise_level=0.02),
    "colorization": dict(strip_color=True),
    "combination": dict(remove_fraction=0.3, keep_ratio=0.25, noise_level=0.02, strip_color=True),
}


@dataclass
class SamplePair:
    input_cloud: PointCloud
    input_image: np.ndarray
    camera: Camera
    target_cloud: PointCloud


# degradations


def remove_patches(cloud: PointCloud, fraction: float, patch_count: int, seed: int = 0,
                   centers: list[int] | None = None) -> PointCloud:
    """Cut ``patch_count`` holes, each the kNN ball around a random surviving point.

    Each hole takes ceil(fraction * N / patch_count) points, the last one only
    what remains of the ceil(fraction * N) total.  ``centers`` fixes the hole
    centres (original indices) instead of drawing them.
    """
    if not 0 <= fraction < 1:
        raise ValueError(f"fraction must lie in [0, 1), got {fraction}")
    n = cloud.n
    total = min(math.ceil(fraction * n), n - 1)  # a fraction below one always leaves a point
    if total == 0:
        return cloud.subset(np.arange(n))
    per = math.ceil(fraction * n / patch_count)
    rng = RngStreams(seed).fresh("remove")
    alive = np.ones(n, dtype=bool)
    removed = 0
    for p in range(patch_count):
        size = min(per, total - removed)
        if size <= 0:
            break
        live = np.flatnonzero(alive)
        c = centers[p] if centers is not None else int(live[rng.integers(len(live))])
        if not alive[c]:
            raise ValueError(f"patch centre {c} was already removed")
        nbr, _ = geo.knn_brute(cloud.positions[live], cloud.positions[c][None], size)
        alive[live[nbr[0]]] = False
        removed += size
    return cloud.subset(np.flatnonzero(alive))


def subsample(cloud: PointCloud, keep_ratio: float, seed: int = 0) -> PointCloud:
    """Uniform subset of round(keep_ratio * N) points, original order kept."""
    if not 0 < keep_ratio <= 1:
        raise ValueError(f"keep_ratio must lie in (0, 1], got {keep_ratio}")
    m = int(round(keep_ratio * cloud.n))
    if m < 1:
        raise ValueError(f"keep_ratio {keep_ratio} leaves no points of {cloud.n}")
    if m == cloud.n:
        return cloud.subset(np.arange(cloud.n))
    rng = RngStreams(seed).fresh("subsample")
    return cloud.subset(np.sort(rng.choice(cloud.n, size=m, replace=False)))


def add_noise(cloud: PointCloud, noise_level: float, seed: int = 0,
              radius: float | None = None) -> PointCloud:
    """Gaussian jitter with std ``noise_level * radius``.

    ``radius`` defaults to the bounding-sphere radius of ``cloud`` as passed in.
    """
    if noise_level < 0:
        raise ValueError("noise_level must be non-negative")
    if noise_level == 0:
        return cloud.subset(np.arange(cloud.n))
    if radius is None:
        radius = geo.bounding_sphere_radius(cloud)
    rng = RngStreams(seed).fresh("noise")
    g = rng.standard_normal(cloud.positions.shape)
    pos = cloud.positions.astype(np.float64) + noise_level * radius * g
    feats = None if cloud.features is None else cloud.features.copy()
    return PointCloud(pos, feats)


def strip_color(cloud: PointCloud) -> PointCloud:
    return PointCloud(cloud.positions.copy(), None)


def degrade(cloud: PointCloud, spec: DegradationSpec, radius: float | None = None) -> PointCloud:
    """Apply remove -> subsample -> noise -> strip, in that fixed order."""
    radius = geo.bounding_sphere_radius(cloud) if radius is None else radius
    out = remove_patches(cloud, spec.remove_fraction, spec.patch_count, spec.seed)
    out = subsample(out, spec.keep_ratio, spec.seed)
    out = add_noise(out, spec.noise_level, spec.seed, radius=radius)
    if spec.strip_color:
        out = strip_color(out)
    return out


def make_pair(gt: PointCloud, image: np.ndarray, camera: Camera, spec: DegradationSpec,
              n_gt: int | None = None) -> SamplePair:
    """Degraded input plus the untouched target; noise scale is the target's radius."""
    if n_gt is not None and gt.n != n_gt:
        raise ValueError(f"target has {gt.n} points, expected {n_gt}")
    target = gt.subset(np.arange(gt.n))
    return SamplePair(degrade(gt, spec), np.array(image, copy=True), camera, target)


# RGB-D


def rgbd_to_cloud(rgb: np.ndarray, depth: np.ndarray, camera: Camera,
                  depth_max: float = np.inf) -> PointCloud:
    """Back-project pixels with 0 < depth <= depth_max; pixel (i, j) sits at u=j, v=i."""
    depth = np.asarray(depth, dtype=np.float64)
    if (depth < 0).any():
        raise ValueError("depth must be non-negative")
    vi, uj = np.nonzero((depth > 0) & (depth <= depth_max))
    if len(vi) == 0:
        raise ValueError("no pixel has a valid depth")
    z = depth[vi, uj]
    pc = np.stack([(uj - camera.cx) / camera.fx * z, (vi - camera.cy) / camera.fy * z, z], axis=1)
    world = (pc - camera.translation) @ camera.rotation
    colors = np.asarray(rgb, dtype=np.float64)[vi, uj] if rgb is not None else None
    return PointCloud(world, colors)


# synthetic scenes


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera rotation and translation; camera x right, y down, z forward."""
    eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
    fwd = target - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    return rot, -rot @ eye


def _cube(n, rng):
    face = rng.integers(6, size=n)
    uv = rng.uniform(-0.5, 0.5, size=(n, 2))
    axis, sign = face // 2, np.where(face % 2 == 0, -0.5, 0.5)
    pos = np.empty((n, 3))
    for a in range(3):
        others = [b for b in range(3) if b != a]
        m = axis == a
        pos[m, a] = sign[m]
        pos[np.ix_(m, others)] = uv[m]
    palette = np.array([[0.9, 0.2, 0.2], [0.2, 0.8, 0.3], [0.2, 0.3, 0.9],
                        [0.9, 0.8, 0.2], [0.8, 0.3, 0.8], [0.2, 0.8, 0.8]])
    return pos, palette[face]


def _sphere(n, rng):
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    lat = (v[:, 2] + 1) / 2
    band = np.floor(lat * 4) % 2
    colors = np.stack([lat, 0.3 + 0.5 * band, 1 - lat], axis=1)
    return v, colors


def _two_room(n, rng):
    # floor and walls of two 2x2x1 rooms side by side, sampled by area
    planes = [  # (fixed axis, value, (lo, hi) of the other two axes, colour)
        (2, 0.0, ((-2, 2), (-1, 1)), None),
        (0, -2.0, ((-1, 1), (0, 1)), (0.8, 0.4, 0.3)),
        (0, 0.0, ((-1, 1), (0, 1)), (0.9, 0.9, 0.8)),
        (0, 2.0, ((-1, 1), (0, 1)), (0.3, 0.5, 0.8)),
        (1, 1.0, ((-2, 2), (0, 1)), (0.6, 0.7, 0.4)),
    ]
    areas = np.array([(h0[1] - h0[0]) * (h1[1] - h1[0]) for _, _, (h0, h1), _ in planes])
    which = rng.choice(len(planes), size=n, p=areas / areas.sum())
    pos = np.empty((n, 3))
    colors = np.empty((n, 3))
    for k, (axis, val, (r0, r1), col) in enumerate(planes):
        m = which == k
        others = [b for b in range(3) if b != axis]
        pos[m, axis] = val
        pos[m, others[0]] = rng.uniform(*r0, size=m.sum())
        pos[m, others[1]] = rng.uniform(*r1, size=m.sum())
        if col is None:
            tile = (np.floor(pos[m, 0] * 2) + np.floor(pos[m, 1] * 2)) % 2
            colors[m] = np.where(tile[:, None] > 0, [0.85, 0.85, 0.85], [0.25, 0.25, 0.3])
        else:
            colors[m] = col
    return pos, colors


def _terrain(n, rng):
    xy = rng.uniform(-1, 1, size=(n, 2))
    z = 0.25 * np.sin(2.5 * xy[:, 0]) * np.cos(2.0 * xy[:, 1])
    tile = (np.floor(xy[:, 0] * 3) + np.floor(xy[:, 1] * 3)) % 2
    colors = np.where(tile[:, None] > 0, [0.3, 0.6, 0.2], [0.6, 0.5, 0.3])
    return np.column_stack([xy, z]), colors


_BUILDERS = {"cube": _cube, "sphere-shell": _sphere, "two-room": _two_room,
             "checker-terrain": _terrain}
_VIEWS = {"cube": (2.2, -2.6, 1.8), "sphere-shell": (2.4, -2.8, 1.6),
          "two-room": (0.5, -4.5, 4.5), "checker-terrain": (1.0, -2.8, 2.2)}


def render(cloud: PointCloud, camera: Camera, radius_px: float = 1.5,
           background: float = 0.0) -> np.ndarray:
    """Splat coloured points through the z-buffer into an H x W x 3 image."""
    _, owner = geo.zbuffer(camera, cloud, radius_px)
    img = np.full((camera.height, camera.width, 3), background, dtype=np.float64)
    hit = owner >= 0
    img[hit] = cloud.features[owner[hit]]
    return img


def synth_scene(kind: str, n_gt: int, seed: int = 0, image_size: int = 32):
    """Coloured ground-truth cloud, its splat render and the camera used."""
    if kind not in _BUILDERS:
        raise ValueError(f"unknown scene kind {kind!r}; choose from {', '.join(SCENE_KINDS)}")
    if n_gt < 64:
        raise ValueError("scenes need at least 64 points")
    rng = RngStreams(seed).fresh(f"scene/{kind}")
    pos, colors = _BUILDERS[kind](n_gt, rng)
    cloud = PointCloud(pos, colors)
    center = pos.mean(axis=0)
    rot, trans = look_at(center + np.array(_VIEWS[kind]), center)
    # focal length that fits the bounding sphere into 90% of the frame
    dist = np.linalg.norm(_VIEWS[kind])
    r = geo.bounding_sphere_radius(cloud)
    half = math.asin(min(0.95, r / dist))
    f = 0.45 * image_size / math.tan(half)
    c = image_size / 2.0
    camera = Camera(f, f, c, c, image_size, image_size, rot, trans)
    return cloud, render(cloud, camera), camera


# files


def write_ppm(path, image: np.ndarray) -> None:
    img = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: only binary 8-bit P6 is supported")
    w, h = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos + 1)
    return data.reshape(h, w, 3).astype(np.float32) / 255.0


def write_pair(directory, pair: SamplePair, spec: DegradationSpec, extra: dict | None = None):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    geo.write_ply(d / "target.ply", pair.target_cloud)
    geo.write_ply(d / "input.ply", pair.input_cloud)
    write_ppm(d / "image.ppm", pair.input_image)
    pair.camera.save(d / "camera.json")
    doc = spec.to_dict() | (extra or {})
    (d / "spec.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_pair(directory) -> SamplePair:
    d = Path(directory)
    for name in ("target.ply", "input.ply", "image.ppm", "camera.json"):
        if not (d / name).exists():
            raise FileNotFoundError(f"{d / name} is missing")
    return SamplePair(geo.read_ply(d / "input.ply"), read_ppm(d / "image.ppm"),
                      Camera.load(d / "camera.json"), geo.read_ply(d / "target.ply"))


def tree_hash(directory) -> str:
    """SHA-256 over relative paths and contents of every file under ``directory``."""
    root = Path(directory)
    h = hashlib.sha256()
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(b"\0")
        h.update(p.read_bytes())
    return h.hexdigest()
