"""Point-set distances: Chamfer, density-aware Chamfer, exact EMD, F1 and colour MSE."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import geometry as geo
from .geometry import PointCloud

EMD_CAP = 4096


def _points(s) -> np.ndarray:
    p = s.positions if isinstance(s, PointCloud) else s
    p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    if len(p) == 0:
        raise ValueError("empty point cloud")
    return p


def nearest(a: np.ndarray, b: np.ndarray, chunk: int = 1024) -> tuple[np.ndarray, np.ndarray]:
    """For every row of ``a``: index of and squared distance to its nearest row of ``b``."""
    idx = np.empty(len(a), dtype=np.int64)
    sq = np.empty(len(a))
    for s in range(0, len(a), chunk):
        d = a[s:s + chunk, None, :] - b[None, :, :]
        d = (d * d).sum(axis=-1)
        j = np.argmin(d, axis=1)
        idx[s:s + chunk] = j
        sq[s:s + chunk] = d[np.arange(len(j)), j]
    return idx, sq


def chamfer(s1, s2) -> float:
    a, b = _points(s1), _points(s2)
    return 0.5 * (nearest(a, b)[1].mean() + nearest(b, a)[1].mean())


def dcd(s1, s2, alpha: float = 40.0) -> float:
    """Density-aware Chamfer: nearest squared distances pushed through 1 - exp(-alpha d^2)."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    a, b = _points(s1), _points(s2)
    ab = 1.0 - np.exp(-alpha * nearest(a, b)[1])
    ba = 1.0 - np.exp(-alpha * nearest(b, a)[1])
    return float(0.5 * (ab.mean() + ba.mean()))


def assignment(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost perfect matching of a square matrix; returns column per row.

    Shortest augmenting paths with row/column potentials (Hungarian method),
    O(n^3), the inner relaxation vectorised over columns.
    """
    c = np.asarray(cost, dtype=np.float64)
    n = c.shape[0]
    if c.shape != (n, n):
        raise ValueError(f"cost matrix must be square, got {c.shape}")
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    owner = np.zeros(n + 1, dtype=np.int64)  # row (1-based) matched to column j; 0 = free
    way = np.zeros(n + 1, dtype=np.int64)
    cols = np.arange(1, n + 1)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = cols[~used[1:]]
            cur = c[i0 - 1, free - 1] - u[i0] - v[free]
            better = cur < minv[free]
            minv[free[better]] = cur[better]
            way[free[better]] = j0
            k = np.argmin(minv[free])
            delta = minv[free[k]]
            j1 = free[k]
            u[owner[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    match = np.empty(n, dtype=np.int64)
    match[owner[1:] - 1] = np.arange(n)
    return match


def emd_exact(s1, s2) -> float:
    """Mean Euclidean distance under the optimal one-to-one matching."""
    a, b = _points(s1), _points(s2)
    if len(a) != len(b):
        raise ValueError(f"EMD needs equal sizes, got {len(a)} and {len(b)}; resample first")
    if len(a) > EMD_CAP:
        raise ValueError(f"{len(a)} points exceed the exact-EMD cap of {EMD_CAP}; resample first")
    cost = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1))
    match = assignment(cost)
    return float(cost[np.arange(len(a)), match].mean())


def resample_to(cloud, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` points drawn uniformly; without replacement when shrinking."""
    p = _points(cloud)
    if n <= len(p):
        idx = np.sort(rng.choice(len(p), size=n, replace=False)) if n < len(p) else np.arange(n)
    else:
        idx = np.concatenate([np.arange(len(p)), rng.choice(len(p), size=n - len(p))])
    return p[idx]


def emd(s1, s2, resample_n: int = 2048, seed: int = 0) -> float:
    a, b = _points(s1), _points(s2)
    n = min(len(a), len(b), resample_n)
    rng = np.random.default_rng(seed)
    return emd_exact(resample_to(a, n, rng), resample_to(b, n, rng))


def f1(pred, gt, tau: float) -> tuple[float, float, float]:
    """``(f1, precision, recall)`` at distance threshold ``tau``."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    a, b = _points(pred), _points(gt)
    t2 = tau * tau
    precision = float((nearest(a, b)[1] <= t2).mean())
    recall = float((nearest(b, a)[1] <= t2).mean())
    if precision + recall == 0:
        return 0.0, precision, recall
    return 2 * precision * recall / (precision + recall), precision, recall


def color_mse(pred: PointCloud, gt: PointCloud) -> float:
    """Mean squared channel error between each gt point and its nearest prediction."""
    if not (pred.has_colors and gt.has_colors):
        raise ValueError("colour MSE needs colours on both clouds")
    idx, _ = nearest(_points(gt), _points(pred))
    diff = pred.features[idx].astype(np.float64) - gt.features
    return float((diff * diff).mean())


@dataclass
class MetricReport:
    cd: float
    dcd: float
    emd: float
    f1: float
    precision: float
    recall: float
    color_mse: float | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["color_mse"] is None:
            del d["color_mse"]
        return d


def evaluate(pred: PointCloud, gt: PointCloud, alpha: float = 40.0, tau: float | None = None,
             resample_n: int = 2048, seed: int = 0, colors: bool = False) -> MetricReport:
    """All metrics for one prediction; ``tau`` defaults to 1% of the gt radius."""
    if tau is None:
        tau = 0.01 * (geo.bounding_sphere_radius(gt) or 1.0)
    f, p, r = f1(pred, gt, tau)
    cm = color_mse(pred, gt) if colors else None
    return MetricReport(chamfer(pred, gt), dcd(pred, gt, alpha), emd(pred, gt, resample_n, seed),
                        f, p, r, cm)
