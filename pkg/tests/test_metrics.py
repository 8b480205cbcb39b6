import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linear_sum_assignment
from scipy.spatial.transform import Rotation

from pcdiff import metrics as MT
from pcdiff.geometry import PointCloud
from pcdiff.harness.oracles import brute_emd

O = np.zeros((1, 3))
X = np.array([[1.0, 0.0, 0.0]])


def random_cloud(rng, n):
    return rng.standard_normal((n, 3)) * rng.uniform(0.1, 3)


# chamfer


def test_chamfer_examples():
    s = np.random.default_rng(0).standard_normal((20, 3))
    assert MT.chamfer(s, s) == 0.0
    assert MT.chamfer(O, X) == 1.0
    with pytest.raises(ValueError):
        MT.chamfer(np.zeros((0, 3)), X)


def test_chamfer_matches_double_loop():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((32, 3)), rng.standard_normal((32, 3))

    def one_sided(p, q):
        return sum(min(float(np.sum((x - y) ** 2)) for y in q) for x in p) / len(p)

    assert MT.chamfer(a, b) == pytest.approx(0.5 * (one_sided(a, b) + one_sided(b, a)), rel=1e-12)


# dcd


def test_dcd_examples():
    s = np.random.default_rng(0).standard_normal((20, 3))
    assert MT.dcd(s, s) == 0.0
    assert abs(MT.dcd(O, X, alpha=1.0) - (1 - math.exp(-1))) <= 1e-6
    with pytest.raises(ValueError):
        MT.dcd(O, X, alpha=0.0)


@settings(max_examples=100)
@given(st.integers(0, 2**16))
def test_dcd_range_and_symmetry(seed):
    rng = np.random.default_rng(seed)
    a, b = random_cloud(rng, int(rng.integers(1, 40))), random_cloud(rng, int(rng.integers(1, 40)))
    alpha = float(rng.uniform(0.1, 100))
    v = MT.dcd(a, b, alpha)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(MT.dcd(b, a, alpha), abs=1e-15)


@settings(max_examples=100)
@given(st.integers(0, 2**16))
def test_dcd_second_order_agreement_with_cd(seed):
    rng = np.random.default_rng(seed)
    scale = float(rng.uniform(1e-3, 0.1))
    a, b = rng.uniform(-1, 1, (20, 3)) * scale, rng.uniform(-1, 1, (25, 3)) * scale
    alpha = float(rng.uniform(1, 40))
    m = np.sqrt(((a[:, None] - b[None]) ** 2).sum(-1)).max()
    assert abs(MT.dcd(a, b, alpha) - alpha * MT.chamfer(a, b)) <= alpha ** 2 * m ** 4 / 2 + 1e-15


# emd


def test_emd_examples():
    rng = np.random.default_rng(0)
    s = rng.standard_normal((30, 3))
    assert MT.emd_exact(s, s[rng.permutation(30)]) == pytest.approx(0.0, abs=1e-12)
    line = lambda xs: np.c_[xs, np.zeros(2), np.zeros(2)]  # noqa: E731
    assert MT.emd_exact(line([0.0, 1.0]), line([0.1, 0.9])) == pytest.approx(0.1)


def test_emd_rejects_unequal_and_huge():
    with pytest.raises(ValueError, match="resample"):
        MT.emd_exact(np.zeros((3, 3)), np.zeros((4, 3)))
    big = np.zeros((MT.EMD_CAP + 1, 3))
    with pytest.raises(ValueError, match="resample"):
        MT.emd_exact(big, big)


def test_emd_matches_factorial_enumeration():
    rng = np.random.default_rng(3)
    for _ in range(100):
        n = int(rng.integers(1, 7))
        a, b = rng.standard_normal((n, 3)), rng.standard_normal((n, 3))
        assert abs(MT.emd_exact(a, b) - brute_emd(a, b)) <= 1e-9


@settings(max_examples=100)
@given(st.integers(0, 2**16), st.integers(1, 120))
def test_assignment_agrees_with_scipy(seed, n):
    rng = np.random.default_rng(seed)
    cost = rng.uniform(0, 10, (n, n))
    if seed % 3 == 0:
        cost = np.round(cost)  # many ties
    ours = MT.assignment(cost)
    rows, cols = linear_sum_assignment(cost)
    assert sorted(ours) == list(range(n))
    assert cost[np.arange(n), ours].sum() == pytest.approx(cost[rows, cols].sum(), abs=1e-9)


@settings(max_examples=30)
@given(st.integers(0, 2**16))
def test_emd_dominates_nearest_neighbour_means(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(7, 257))
    a, b = rng.standard_normal((n, 3)), rng.uniform(-1, 1, (n, 3))
    e = MT.emd_exact(a, b)
    assert e >= np.sqrt(MT.nearest(a, b)[1]).mean() - 1e-12
    assert e >= np.sqrt(MT.nearest(b, a)[1]).mean() - 1e-12


def test_emd_resamples_to_smaller_size():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((300, 3)), rng.standard_normal((200, 3))
    assert MT.emd(a, b, resample_n=2048, seed=1) == MT.emd(a, b, resample_n=2048, seed=1)
    assert MT.emd(a, a) == pytest.approx(0.0, abs=1e-12)


# f1


def test_f1_examples():
    s = np.random.default_rng(0).standard_normal((10, 3))
    assert MT.f1(s, s, 0.01) == (1.0, 1.0, 1.0)
    assert MT.f1(s, s + 100, 0.5) == (0.0, 0.0, 0.0)
    gt = np.array([[0.0, 0, 0], [1, 0, 0]])
    pred = np.array([[0.0, 0, 0], [1, 0, 0], [5, 0, 0], [6, 0, 0]])
    f, p, r = MT.f1(pred, gt, 0.1)
    assert (p, r) == (0.5, 1.0) and f == pytest.approx(2 / 3)


@settings(max_examples=100)
@given(st.integers(0, 2**16))
def test_f1_monotone_in_tau(seed):
    rng = np.random.default_rng(seed)
    a, b = random_cloud(rng, 30), random_cloud(rng, 25)
    taus = np.sort(rng.uniform(0.01, 3, 8))[::-1]
    scores = [MT.f1(a, b, t) for t in taus]
    for hi, lo in zip(scores[:-1], scores[1:]):
        assert all(x >= y for x, y in zip(hi, lo))


# colour


def test_color_mse_examples():
    rng = np.random.default_rng(0)
    pos = rng.standard_normal((40, 3))
    col = rng.uniform(size=(40, 3))
    gt = PointCloud(pos, col)
    assert MT.color_mse(gt, gt) == 0.0
    shifted = col.copy()
    shifted[:, 1] = np.where(col[:, 1] > 0.5, col[:, 1] - 0.5, col[:, 1] + 0.5)
    assert MT.color_mse(PointCloud(pos, shifted), gt) == pytest.approx(0.25 / 3, rel=1e-6)
    dup = PointCloud(np.vstack([pos, pos[:7]]), np.vstack([col, col[:7]]))
    assert MT.color_mse(dup, gt) == 0.0
    with pytest.raises(ValueError):
        MT.color_mse(PointCloud(pos), gt)


# rigid invariance


@settings(max_examples=100)
@given(st.integers(0, 2**16))
def test_metrics_are_rigid_invariant(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-1, 1, (int(rng.integers(5, 60)), 3))
    b = a[: len(a) // 2 + 1] + rng.normal(0, 0.1, (len(a) // 2 + 1, 3))
    b = np.vstack([b, rng.uniform(-1, 1, (len(a) - len(b), 3))])
    rot = Rotation.random(random_state=int(rng.integers(2**31))).as_matrix()
    shift = rng.uniform(-5, 5, 3)
    ra, rb = a @ rot.T + shift, b @ rot.T + shift
    col_a, col_b = rng.uniform(size=(len(a), 3)), rng.uniform(size=(len(b), 3))
    tau = float(rng.uniform(0.05, 0.5))
    before = MT.evaluate(PointCloud(a, col_a), PointCloud(b, col_b), tau=tau, colors=True)
    after = MT.evaluate(PointCloud(ra, col_a), PointCloud(rb, col_b), tau=tau, colors=True)
    for k, v in before.to_dict().items():
        assert abs(v - after.to_dict()[k]) <= 1e-5, k


def test_report_schema():
    rng = np.random.default_rng(0)
    r = MT.evaluate(PointCloud(rng.standard_normal((20, 3))), PointCloud(rng.standard_normal((20, 3))))
    assert set(r.to_dict()) == {"cd", "dcd", "emd", "f1", "precision", "recall"}
    assert 0 <= r.dcd <= 1 and 0 <= r.f1 <= 1


def test_brute_emd_is_what_it_claims():
    # the oracle itself: enumerate by hand for n=3
    a = np.array([[0.0, 0, 0], [1, 0, 0], [3, 0, 0]])
    b = np.array([[3.0, 0, 0], [0.5, 0, 0], [1, 0, 0]])
    best = min(sum(abs(a[i, 0] - b[p[i], 0]) for i in range(3)) / 3 for p in itertools.permutations(range(3)))
    assert brute_emd(a, b) == pytest.approx(best)
