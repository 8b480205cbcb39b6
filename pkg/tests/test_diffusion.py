import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pcdiff import diffusion as D
from pcdiff import model as M
from pcdiff import degrade as G
from pcdiff.harness.oracles import TOY


def test_single_step_schedule():
    s = D.make_schedule(1, 0.01, 0.5)
    assert s.beta.tolist() == [0.01]
    assert s.alpha_bar.tolist() == [0.99]


def test_long_schedule_nearly_destroys_signal():
    # prod(1 - beta) for the linear ramp evaluated independently in log space
    beta = 1e-4 + (0.02 - 1e-4) * np.arange(1000) / 999
    expected = math.exp(math.fsum(math.log1p(-b) for b in beta))
    s = D.make_schedule(1000, 1e-4, 0.02)
    assert s.alpha_bar[-1] == pytest.approx(expected, rel=1e-9)
    assert 3e-5 < s.alpha_bar[-1] < 5e-5


def test_desk_schedule_ends_near_pure_noise():
    assert D.make_schedule(200, 5e-4, 0.1).alpha_bar[-1] < 0.01


@pytest.mark.parametrize("bad", [(0, 0.1, 0.2), (10, 0.0, 0.2), (10, 0.3, 0.2), (10, 0.1, 1.0)])
def test_schedule_rejects_bad_bounds(bad):
    with pytest.raises(ValueError):
        D.make_schedule(*bad)


@given(st.integers(1, 400), st.floats(1e-5, 0.5), st.floats(0.0, 0.49))
def test_schedule_invariants(T, lo, extra):
    s = D.make_schedule(T, lo, lo + extra)
    assert (np.diff(s.beta) >= 0).all() and s.beta[0] > 0 and s.beta[-1] < 1
    assert (np.diff(s.alpha_bar) < 0).all()
    assert np.allclose(s.alpha_bar, np.cumprod(s.alpha), atol=1e-6)
    assert np.allclose(s.sigma ** 2, s.beta)


def test_q_sample_limits():
    s = D.make_schedule(10, 0.01, 0.2)
    x0 = np.random.default_rng(0).standard_normal((5, 3)).astype(np.float32)
    assert np.allclose(D.q_sample(x0, 4, np.zeros_like(x0), s), np.sqrt(s.alpha_bar[3]) * x0)
    tiny = D.make_schedule(50, 0.9, 0.999)  # alpha_bar_T around 1e-60
    eps = np.ones_like(x0)
    assert np.allclose(D.q_sample(x0, 50, eps, tiny), eps)
    with pytest.raises(ValueError):
        D.q_sample(x0, 0, eps, s)
    with pytest.raises(ValueError):
        D.q_sample(x0, 11, eps, s)


def test_q_sample_statistics():
    s = D.make_schedule(200, 5e-4, 0.1)
    rng = np.random.default_rng(1)
    x0 = np.array([0.3, -0.7, 0.5])
    n = 10_000
    for t in (50, 100, 200):
        xt = D.q_sample(np.broadcast_to(x0, (n, 3)), t, rng.standard_normal((n, 3)), s).astype(np.float64)
        sd = math.sqrt(1 - s.alpha_bar[t - 1])
        assert np.all(np.abs(xt.mean(0) - math.sqrt(s.alpha_bar[t - 1]) * x0) < 3 * sd / math.sqrt(n))
        assert np.all(np.abs(xt.std(0, ddof=1) - sd) < 3 * sd / math.sqrt(2 * (n - 1)))


def test_loss_examples():
    s = D.make_schedule(20, 1e-3, 0.2)
    rng = np.random.default_rng(2)
    x0 = rng.standard_normal((4000, 3)).astype(np.float32)
    eps = rng.standard_normal(x0.shape).astype(np.float32)
    assert D.training_loss(lambda x, t: eps, x0, 5, eps, s).item() == 0.0
    zero = D.training_loss(lambda x, t: np.zeros_like(x), x0, 5, eps, s).item()
    # mean of 12000 chi-square(1) draws: sd sqrt(2/12000)
    assert abs(zero - 1.0) < 3 * math.sqrt(2 / eps.size)
    with pytest.raises(Exception, match="does not match"):
        D.training_loss(lambda x, t: np.zeros((4000, 2)), x0, 5, eps, s)


def test_reverse_step_reduction():
    s = D.make_schedule(5, 0.01, 0.3)
    x = np.random.default_rng(3).standard_normal((6, 3)).astype(np.float32)
    out = D.reverse_step(lambda x, t: np.zeros_like(x), D.DiffusionState(x, 1), s, np.random.default_rng(0))
    assert out.t == 0
    assert np.allclose(out.x, x / np.sqrt(s.alpha[0]))


@given(st.integers(1, 300), st.floats(1e-4, 0.5), st.integers(0, 2**16))
def test_one_step_identity(n, beta, seed):
    rng = np.random.default_rng(seed)
    s = D.make_schedule(1, beta, beta)
    x0 = rng.uniform(-1, 1, (n, 3)).astype(np.float32)
    eps = rng.standard_normal((n, 3)).astype(np.float32)
    xt = D.q_sample(x0, 1, eps, s)
    back = D.reverse_step(lambda x, t: eps, D.DiffusionState(xt, 1), s, rng)
    assert np.abs(back.x - x0).max() <= 1e-5


def test_posterior_mean_with_true_noise():
    # with eps_hat = eps the mean equals E[x_{t-1} | x_t, x_0] of the forward chain
    s = D.make_schedule(30, 1e-3, 0.2)
    rng = np.random.default_rng(4)
    x0 = rng.uniform(-1, 1, (10, 3))
    eps = rng.standard_normal((10, 3))
    t = 12
    xt = D.q_sample(x0, t, eps, s).astype(np.float64)
    ab, ab_prev = s.alpha_bar[t - 1], s.alpha_bar[t - 2]
    a, b = s.alpha[t - 1], s.beta[t - 1]
    posterior = (np.sqrt(ab_prev) * b / (1 - ab)) * x0 + (np.sqrt(a) * (1 - ab_prev) / (1 - ab)) * xt
    mu = (xt - b / np.sqrt(1 - ab) * eps) / np.sqrt(a)
    assert np.allclose(mu, posterior, atol=1e-5)


def toy_eps():
    return lambda x, t: 0.1 * np.tanh(x) * (t / 50)


def test_sampling_is_seeded_and_sized():
    s = D.make_schedule(50, 1e-3, 0.2)
    n_in = 101
    n_out = round(1.3425 * n_in)
    a = D.sample(toy_eps(), n_out, 3, 20, s, np.random.default_rng(7))
    b = D.sample(toy_eps(), n_out, 3, 20, s, np.random.default_rng(7))
    assert a.shape == (136, 3)
    assert a.tobytes() == b.tobytes()
    with pytest.raises(ValueError):
        D.sample(toy_eps(), 5, 3, 51, s, np.random.default_rng(0))


def test_full_stride_equals_unstrided_chain():
    s = D.make_schedule(40, 1e-3, 0.2)
    strided = D.sample(toy_eps(), 30, 3, 40, s, np.random.default_rng(8))
    rng = np.random.default_rng(8)
    state = D.DiffusionState(rng.standard_normal((30, 3)).astype(np.float32), 40)
    while state.t > 0:
        state = D.reverse_step(toy_eps(), state, s, rng)
    assert strided.tobytes() == state.x.tobytes()


def test_respacing_preserves_marginals():
    s = D.make_schedule(200, 5e-4, 0.1)
    ts, sub = D.respace(s, 50)
    assert len(ts) == 50 and ts[0] == 1 and ts[-1] == 200
    assert np.allclose(sub.alpha_bar, s.alpha_bar[ts - 1])


def test_loss_is_permutation_invariant():
    cloud, image, camera = G.synth_scene("cube", 128, seed=1, image_size=16)
    pair = G.make_pair(cloud, image, camera, G.DegradationSpec(keep_ratio=0.5, seed=1))
    params = M.build_params(TOY, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    for p in params.list():
        p.data = (rng.standard_normal(p.shape) * 0.3).astype(np.float32)
    ctx = M.Context.build(pair.input_cloud, pair.input_image, pair.camera, TOY)
    conds = M.compute_conditions(params, TOY, ctx)
    s = D.make_schedule(20, 1e-3, 0.2)
    x0 = ctx.normalize(cloud.subset(np.arange(48)), 3)
    eps = rng.standard_normal(x0.shape).astype(np.float32)
    fn = lambda x, t: M.predict_eps(params, TOY, ctx, conds, x, t, 20)  # noqa: E731
    perm = rng.permutation(48)
    a = D.training_loss(fn, x0, 9, eps, s).item()
    b = D.training_loss(fn, x0[perm], 9, eps[perm], s).item()
    assert abs(a - b) < 1e-5
