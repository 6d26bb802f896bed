import numpy as np
import pytest

from bevterrain import losses as L


def finite_diff(fn, x, h=1e-6):
    """Central-difference gradient of a scalar function of an array."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + h
        fp = fn(x)
        flat[k] = old - h
        fm = fn(x)
        flat[k] = old
        gf[k] = (fp - fm) / (2 * h)
    return g


def test_trav_loss_basics():
    pred = np.array([[0.5]])
    gt = np.zeros((1, 1))
    valid = np.ones((1, 1), dtype=bool)
    value, grad = L.trav_loss(pred, gt, valid)
    assert value == pytest.approx(0.25)
    assert grad[0, 0] == pytest.approx(1.0)
    v2, _ = L.trav_loss(np.array([[0.1, 0.3]]), np.zeros((1, 2)), np.ones((1, 2), dtype=bool))
    assert v2 == pytest.approx(0.05)
    v3, g3 = L.trav_loss(gt, gt, valid)
    assert v3 == 0.0 and np.all(g3 == 0.0)


def test_trav_loss_empty_mask():
    with pytest.raises(ValueError):
        L.trav_loss(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 2), dtype=bool))


def test_smooth_l1_branches():
    assert L.smooth_l1(0.0)[0] == 0.0
    v, d = L.smooth_l1(0.5, beta=1.0)
    assert v == pytest.approx(0.125)
    assert d == pytest.approx(0.5)
    v, d = L.smooth_l1(2.0, beta=1.0)
    assert v == pytest.approx(1.5)
    assert d == pytest.approx(1.0)


def test_smooth_l1_c1_at_beta():
    beta = 0.7
    eps = 1e-9
    vq, dq = L.smooth_l1(beta - eps, beta)
    vl, dl = L.smooth_l1(beta + eps, beta)
    assert vq == pytest.approx(vl, abs=1e-8)
    assert dq == pytest.approx(dl, abs=1e-8)


def test_ele_loss_fixture():
    pred = np.array([0.5, 0.5])
    gt = np.zeros(2)
    obs = np.array([True, False])
    unobs = np.array([False, True])
    value, grad = L.ele_loss(pred, gt, obs, unobs, alpha=0.2)
    assert value == pytest.approx(0.125 + 0.2 * 0.125)
    assert grad[0] == pytest.approx(0.5)
    assert grad[1] == pytest.approx(0.2 * 0.5)


def test_ele_loss_perfect_prediction():
    x = np.linspace(-0.5, 0.5, 10)
    obs = np.ones(10, dtype=bool)
    value, grad = L.ele_loss(x, x.copy(), obs, ~obs, alpha=0.2)
    assert value == 0.0
    assert np.all(grad == 0.0)


def test_ele_loss_alpha_zero_kills_unobserved():
    pred = np.array([1.0, 5.0])
    gt = np.zeros(2)
    obs = np.array([True, False])
    unobs = np.array([False, True])
    v0, g0 = L.ele_loss(pred, gt, obs, unobs, alpha=0.0)
    v_only, _ = L.ele_loss(pred, gt, obs, np.zeros(2, dtype=bool), alpha=0.0)
    assert v0 == pytest.approx(v_only)
    assert g0[1] == 0.0


def test_ele_loss_monotone_in_alpha():
    rng = np.random.default_rng(0)
    pred = rng.normal(size=20)
    gt = rng.normal(size=20)
    obs = rng.random(20) > 0.5
    unobs = ~obs
    values = [L.ele_loss(pred, gt, obs, unobs, a)[0] for a in (0.0, 0.1, 0.2, 0.5, 1.0)]
    assert all(b >= a for a, b in zip(values, values[1:]))


def test_ele_loss_errors():
    with pytest.raises(ValueError):
        L.ele_loss(np.zeros(2), np.zeros(2), np.zeros(2, bool), np.zeros(2, bool), 0.2)
    with pytest.raises(ValueError):
        L.ele_loss(np.zeros(2), np.zeros(2), np.ones(2, bool), np.ones(2, bool), 0.2)


def test_ele_loss_gradient_matches_fd():
    rng = np.random.default_rng(1)
    pred = rng.normal(0, 0.5, size=(6, 6))
    gt = rng.normal(0, 0.5, size=(6, 6))
    # keep residuals away from the beta kink
    res = pred - gt
    pred[np.abs(np.abs(res) - 1.0) < 0.05] += 0.1
    obs = rng.random((6, 6)) > 0.4
    unobs = ~obs & (rng.random((6, 6)) > 0.3)
    _, grad = L.ele_loss(pred, gt, obs, unobs, alpha=0.2)
    fd = finite_diff(lambda p: L.ele_loss(p, gt, obs, unobs, alpha=0.2)[0], pred)
    assert np.allclose(grad, fd, rtol=1e-5, atol=1e-9)


def test_consistency_loss_exact_replication():
    short = np.random.default_rng(2).normal(size=(16, 16))
    from bevterrain.gridmap import center_crop

    micro = np.repeat(np.repeat(center_crop(short), 4, 0), 4, 1)
    value, gs, gm = L.consistency_loss(short, micro)
    assert value == 0.0
    assert np.all(gs == 0.0) and np.all(gm == 0.0)


def test_consistency_loss_uniform_offset():
    short = np.full((16, 16), 1.0)
    micro = np.full((32, 32), 0.5)
    value, gs, gm = L.consistency_loss(short, micro)
    assert value == pytest.approx(0.125)


def test_consistency_loss_gradients_match_fd():
    rng = np.random.default_rng(3)
    short = rng.normal(0, 0.3, size=(16, 16))
    micro = rng.normal(0, 0.3, size=(32, 32))
    micro_valid = rng.random((32, 32)) > 0.2
    _, gs, gm = L.consistency_loss(short, micro, micro_valid=micro_valid)
    fd_s = finite_diff(lambda s: L.consistency_loss(s, micro, micro_valid=micro_valid)[0], short)
    fd_m = finite_diff(lambda m: L.consistency_loss(short, m, micro_valid=micro_valid)[0], micro)
    assert np.allclose(gs, fd_s, rtol=1e-5, atol=1e-9)
    assert np.allclose(gm, fd_m, rtol=1e-5, atol=1e-9)


def test_consistency_single_micro_cell_gradient():
    # |r| < 1: gradient w.r.t. one micro cell is r / 16 / count
    short = np.zeros((16, 16))
    micro = np.zeros((32, 32))
    short[8, 8] = 0.25  # inside the crop window [4, 12)
    value, gs, gm = L.consistency_loss(short, micro)
    count = 8 * 8
    r = 0.25
    block = gm[16:20, 16:20]  # micro block of cropped cell (8, 8) -> (4, 4)
    assert np.allclose(block, -r / 16.0 / count)


def test_total_loss_arithmetic():
    w = L.LossWeights()
    shape = (4, 4)
    z = np.zeros(shape)
    mk = lambda v: (v, z)
    report = L.total_loss(mk(0.25), mk(0.25), mk(0.125), mk(0.125), (0.0, z, z), w)
    assert report.total == pytest.approx(1.5, rel=1e-12)
    zero = L.total_loss(mk(0.0), mk(0.0), mk(0.0), mk(0.0), (0.0, z, z), w)
    assert zero.total == 0.0


def test_total_loss_exact_weighted_sum():
    rng = np.random.default_rng(4)
    w = L.LossWeights(alpha=0.2, mu=2.0, lam=2.0, gamma=5.0)
    z = np.zeros((3, 3))
    vals = rng.random(5)
    report = L.total_loss(
        (vals[0], z), (vals[1], z), (vals[2], z), (vals[3], z), (vals[4], z, z), w
    )
    expected = w.mu * (vals[0] + vals[1]) + w.lam * (vals[2] + vals[3]) + w.gamma * vals[4]
    assert abs(report.total - expected) <= 1e-12 * abs(expected)


def test_total_loss_linear_in_weights():
    z = np.zeros((2, 2))
    mk = lambda v: (v, z)
    base = L.total_loss(mk(0.1), mk(0.2), mk(0.3), mk(0.4), (0.5, z, z), L.LossWeights(gamma=5.0))
    doubled = L.total_loss(mk(0.1), mk(0.2), mk(0.3), mk(0.4), (0.5, z, z), L.LossWeights(gamma=10.0))
    assert doubled.total - base.total == pytest.approx(5.0 * 0.5)
    # gamma = 0 removes the consistency term entirely
    off = L.total_loss(mk(0.1), mk(0.2), mk(0.3), mk(0.4), (0.5, z, z), L.LossWeights(gamma=0.0))
    assert off.total == pytest.approx(2 * 0.3 + 2 * 0.7)


def test_weights_validation():
    with pytest.raises(ValueError):
        L.LossWeights(alpha=-0.1)
