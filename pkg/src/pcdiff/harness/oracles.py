"""Independent reference checks runnable from the command line.

Each suite returns ``OracleResult`` rows holding the measured error next to the
tolerance it was judged against.
"""
from __future__ import annotations

import contextlib
import itertools
import math
from dataclasses import asdict, dataclass

import numpy as np

from .. import conditioning as cond
from .. import degrade as G
from .. import diffusion as D
from .. import geometry as geo
from .. import metrics as MT
from .. import model as M
from .. import numerics as nx
from ..numerics import tensor as _tensor

SUITES = ("fd", "emd", "knn", "forward", "dcd", "reverse")


@dataclass
class OracleResult:
    suite: str
    name: str
    passed: bool
    measured: float
    tolerance: float
    detail: str = ""

    def __post_init__(self):
        # suites compute these with numpy; keep the rows JSON-native
        self.passed, self.measured, self.tolerance = bool(self.passed), float(self.measured), float(self.tolerance)

    def to_dict(self) -> dict:
        return asdict(self)


TOY = M.ModelConfig(c1=4, c2=4, c_sa1=8, c_sa2=8, c_l=8, z=8, d_k=4, h1=8, h2=8, h3=8)


def toy_problem(seed: int = 0, n: int = 32, cfg: M.ModelConfig = TOY, T: int = 20):
    """Denoiser loss at ``n`` points with every parameter randomised.

    Returns ``(loss_fn, params)``; the head is re-drawn too, so no gradient
    path is trivially zero.
    """
    rng = nx.RngStreams(seed).child("toy")
    cloud, image, camera = G.synth_scene("cube", 2 * n, seed=seed, image_size=16)
    pair = G.make_pair(cloud, image, camera, G.DegradationSpec(keep_ratio=0.5, seed=seed))
    params = M.build_params(cfg, rng.fresh("init"))
    draw = rng.fresh("randomise")
    for t in params.list():
        t.data = (draw.standard_normal(t.shape) * 0.3).astype(np.float32)
    ctx = M.Context.build(pair.input_cloud, pair.input_image, pair.camera, cfg)
    keep = np.sort(draw.choice(cloud.n, n, replace=False))
    x0 = ctx.normalize(cloud.subset(keep), cfg.d)
    eps = draw.standard_normal(x0.shape)
    sched = D.make_schedule(T, 1e-3, 0.2)
    t = T // 2

    def loss_fn():
        conds = M.compute_conditions(params, cfg, ctx)
        return D.training_loss(lambda x, tt: M.predict_eps(params, cfg, ctx, conds, x, tt, T),
                               x0, t, eps, sched)

    return loss_fn, params


@contextlib.contextmanager
def injected_gradient_bug():
    """Scale the sigmoid backward by 1.1, leaving the forward value intact."""
    original = _tensor.sigmoid

    def buggy(x):
        y = original(x)
        s = y.data
        return _tensor._result("sigmoid", s, (x,), lambda g: (1.1 * g * s * (1.0 - s),))

    nx.sigmoid = _tensor.sigmoid = buggy
    try:
        yield
    finally:
        nx.sigmoid = _tensor.sigmoid = original


def suite_fd(seed: int = 0, tol: float = 1e-4, inject_bug: bool = False) -> list[OracleResult]:
    loss_fn, params = toy_problem(seed)
    with injected_gradient_bug() if inject_bug else contextlib.nullcontext():
        rep = nx.grad_check_report(loss_fn, params.list())
    return [OracleResult("fd", "denoiser+conditioning", rep.max_rel_error < tol, rep.max_rel_error,
                         tol, f"{rep.entries} entries, worst {rep.worst_param}{list(rep.worst_index)}")]


def brute_emd(a: np.ndarray, b: np.ndarray) -> float:
    cost = np.sqrt(((a[:, None] - b[None]) ** 2).sum(-1))
    n = len(a)
    return min(cost[np.arange(n), list(p)].mean() for p in itertools.permutations(range(n)))


def suite_emd(seed: int = 0, pairs: int = 100) -> list[OracleResult]:
    rng = nx.RngStreams(seed).fresh("oracle/emd")
    worst = 0.0
    for _ in range(pairs):
        n = int(rng.integers(1, 7))
        a, b = rng.standard_normal((n, 3)), rng.standard_normal((n, 3))
        worst = max(worst, abs(MT.emd_exact(a, b) - brute_emd(a, b)))
    gap = math.inf
    for _ in range(20):
        n = int(rng.integers(7, 257))
        a, b = rng.standard_normal((n, 3)), rng.uniform(-1, 1, (n, 3))
        e = MT.emd_exact(a, b)
        one_sided = max(np.sqrt(MT.nearest(a, b)[1]).mean(), np.sqrt(MT.nearest(b, a)[1]).mean())
        gap = min(gap, e - one_sided)
    return [OracleResult("emd", "factorial brute force", worst <= 1e-9, worst, 1e-9,
                         f"{pairs} pairs, n<=6"),
            OracleResult("emd", "dominates one-sided NN means", gap >= -1e-12, gap, 0.0,
                         "min(emd - max one-sided mean), n<=256")]


def suite_knn(seed: int = 0, cases: int = 20) -> list[OracleResult]:
    rng = nx.RngStreams(seed).fresh("oracle/knn")
    mismatches = 0
    for _ in range(cases):
        n = int(rng.integers(20, 400))
        pts = rng.uniform(-1, 1, (n, 3)) * rng.uniform(0.1, 5, 3)
        q = rng.uniform(-1.5, 1.5, (30, 3))
        k = int(rng.integers(1, min(n, 20) + 1))
        gi, _ = geo.knn_query(geo.KnnIndex(pts), q, k)
        d = ((q[:, None] - pts[None]) ** 2).sum(-1)
        exhaustive = np.array([sorted(range(n), key=lambda j: (row[j], j))[:k] for row in d])
        mismatches += int((gi != exhaustive).any(axis=1).sum())
    return [OracleResult("knn", "grid vs exhaustive sort", mismatches == 0, mismatches, 0,
                         f"{cases} clouds x 30 queries")]


def suite_forward(seed: int = 0, samples: int = 10_000, T: int = 200) -> list[OracleResult]:
    sched = D.make_schedule(T, 5e-4, 0.1)
    rng = nx.RngStreams(seed).fresh("oracle/forward")
    x0 = rng.uniform(-1, 1, 3)
    out = []
    for t in (T // 4, T // 2, T):
        eps = rng.standard_normal((samples, 3))
        xt = D.q_sample(np.broadcast_to(x0, eps.shape), t, eps, sched).astype(np.float64)
        ab = sched.alpha_bar[t - 1]
        sd = math.sqrt(1 - ab)
        z_mean = np.abs(xt.mean(0) - math.sqrt(ab) * x0) / (sd / math.sqrt(samples))
        # standard error of the sample std for a normal is sd / sqrt(2(n-1))
        z_std = np.abs(xt.std(0, ddof=1) - sd) / (sd / math.sqrt(2 * (samples - 1)))
        worst = float(max(z_mean.max(), z_std.max()))
        out.append(OracleResult("forward", f"q_sample t={t}", worst < 3.0, worst, 3.0,
                                "max |z| over mean and std of 3 coordinates"))
    return out


def suite_dcd(seed: int = 0, pairs: int = 1000) -> list[OracleResult]:
    rng = nx.RngStreams(seed).fresh("oracle/dcd")
    s = rng.standard_normal((50, 3))
    self_d = MT.dcd(s, s)
    single = MT.dcd(np.zeros((1, 3)), np.array([[1.0, 0.0, 0.0]]), alpha=1.0)
    lo, hi = math.inf, -math.inf
    for _ in range(pairs):
        a = rng.standard_normal((int(rng.integers(1, 40)), 3)) * rng.uniform(0.01, 10)
        b = rng.standard_normal((int(rng.integers(1, 40)), 3)) * rng.uniform(0.01, 10)
        v = MT.dcd(a, b, alpha=float(rng.uniform(0.1, 100)))
        lo, hi = min(lo, v), max(hi, v)
    expected = 1 - math.exp(-1)
    return [OracleResult("dcd", "dcd(S, S) = 0", self_d == 0.0, self_d, 0.0),
            OracleResult("dcd", "single point, alpha=1", abs(single - expected) <= 1e-6,
                         abs(single - expected), 1e-6),
            OracleResult("dcd", "range [0, 1]", lo >= 0.0 and hi <= 1.0, hi, 1.0,
                         f"{pairs} pairs, min {lo:.3g} max {hi:.3g}")]


def suite_reverse(seed: int = 0, cases: int = 20) -> list[OracleResult]:
    """One reverse step at T=1 with the true noise injected returns x0."""
    rng = nx.RngStreams(seed).fresh("oracle/reverse")
    worst = 0.0
    for _ in range(cases):
        n = int(rng.integers(1, 300))
        sched = D.make_schedule(1, float(rng.uniform(1e-4, 0.5)), 0.6)
        x0 = rng.uniform(-1, 1, (n, 3)).astype(np.float32)
        eps = rng.standard_normal((n, 3)).astype(np.float32)
        xt = D.q_sample(x0, 1, eps, sched)
        back = D.reverse_step(lambda x, t: eps, D.DiffusionState(xt, 1), sched, rng)
        worst = max(worst, float(np.abs(back.x - x0).max()))
    return [OracleResult("reverse", "reverse step recovers x0", worst <= 1e-5, worst, 1e-5,
                         f"{cases} random clouds")]


def run(suites=SUITES, seed: int = 0, inject_bug: bool = False) -> list[OracleResult]:
    fns = {"fd": lambda: suite_fd(seed, inject_bug=inject_bug), "emd": lambda: suite_emd(seed),
           "knn": lambda: suite_knn(seed), "forward": lambda: suite_forward(seed),
           "dcd": lambda: suite_dcd(seed), "reverse": lambda: suite_reverse(seed)}
    unknown = [s for s in suites if s not in fns]
    if unknown:
        raise ValueError(f"unknown oracle suite {unknown[0]!r}; choose from {', '.join(SUITES)}")
    return [r for s in suites for r in fns[s]()]


def attention_rows(seed: int = 0) -> float:
    """Largest deviation of an attention row sum from one, for a random fusion."""
    rng = np.random.default_rng(seed)
    q = nx.Tensor(rng.standard_normal((int(rng.integers(1, 30)), 8)) * 3)
    kv = rng.standard_normal((int(rng.integers(1, 30)), 8)) * 3
    _, w = cond.attention(q, nx.Tensor(kv), nx.Tensor(kv))
    return float(np.abs(w.data.sum(axis=-1) - 1).max())
