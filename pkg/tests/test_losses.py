import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import objvid3d.autodiff as ad
from objvid3d.geometry import CameraTrack
from objvid3d.losses import (
    LossLog,
    NonFiniteLoss,
    edge_matching,
    kl_diag_gaussian,
    presence_hinge,
    pyramid_nll,
    total_loss,
    velocity_l1,
)
from objvid3d.model import LossConfig, ModelConfig, PosteriorGaussian, SceneModel, reparameterize


@pytest.fixture(autouse=True)
def fp64():
    with ad.default_dtype(np.float64):
        yield


# -- likelihood -------------------------------------------------------------


def test_nll_zero_when_equal(rng):
    x = rng.uniform(size=(2, 16, 16, 3))
    assert float(pyramid_nll(x, x.copy(), 4, 0.1).data) == 0.0


def test_nll_constant_offset(rng):
    x = rng.uniform(size=(1, 16, 16, 3))
    d, sigma = 0.05, 0.1
    got = float(pyramid_nll(x, x + d, 4, sigma).data)
    assert got == pytest.approx(4 * d**2 / (2 * sigma**2), rel=1e-12)


def test_nll_checkerboard_vanishes_above_level_zero(rng):
    x = rng.uniform(size=(8, 8, 3))
    board = (np.indices((8, 8)).sum(0) % 2 * 2 - 1)[..., None] * 0.02
    one = float(pyramid_nll(x, x + board, 1, 0.1).data)
    three = float(pyramid_nll(x, x + board, 3, 0.1).data)
    assert one == pytest.approx(0.02**2 / 0.02)
    assert three == pytest.approx(one, abs=1e-15)


def test_nll_odd_sizes_crop(rng):
    x = rng.uniform(size=(9, 7, 3))
    assert float(pyramid_nll(x, x + 0.1, 3, 0.1).data) == pytest.approx(1.5)


def test_nll_shape_mismatch():
    with pytest.raises(ValueError):
        pyramid_nll(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)), 2, 0.1)


# -- KL ---------------------------------------------------------------------


def test_kl_examples():
    assert float(kl_diag_gaussian(np.zeros((1, 5)), np.ones((1, 5))).data) == 0.0
    assert float(kl_diag_gaussian(np.ones((1, 1)), np.ones((1, 1))).data) == pytest.approx(0.5)


def test_kl_matches_monte_carlo(rng):
    mean = rng.normal(size=4) * 0.8
    std = rng.uniform(0.3, 1.5, size=4)
    n = 400_000
    z = mean + std * rng.standard_normal((n, 4))
    log_q = (-0.5 * ((z - mean) / std) ** 2 - np.log(std)).sum(-1)
    log_p = (-0.5 * z**2).sum(-1)
    mc = float(np.mean(log_q - log_p))
    exact = float(kl_diag_gaussian(mean[None], std[None]).data)
    assert mc == pytest.approx(exact, rel=0.01)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=1, max_size=6), st.floats(0.05, 4))
def test_kl_non_negative(mean, s):
    m = np.array([mean])
    assert float(kl_diag_gaussian(m, np.full_like(m, s)).data) >= -1e-12


# -- regularizers -----------------------------------------------------------


def test_velocity_examples():
    assert float(velocity_l1(np.zeros((4, 3)), np.zeros((4, 2))).data) == 0.0
    assert float(velocity_l1(np.array([[1.0, 0, 0]]), np.zeros((1, 2))).data) == pytest.approx(1.0)


def test_velocity_homogeneous(rng):
    v, nu = rng.normal(size=(2, 5, 3)), rng.normal(size=(2, 5, 3))
    a = float(velocity_l1(v, nu).data)
    assert float(velocity_l1(2 * v, nu).data) == pytest.approx(2 * a, rel=1e-12)


def test_velocity_explicit(rng):
    v, nu = rng.normal(size=(3, 3)), rng.normal(size=(3, 4))
    expected = sum(np.abs(v[g] * np.exp(nu[g, t])).sum() for g in range(3) for t in range(4)) / 12
    assert float(velocity_l1(v, nu).data) == pytest.approx(expected, rel=1e-12)


def test_presence_hinge_examples():
    assert float(presence_hinge(np.array([0.3])).data) == pytest.approx(0.0, abs=1e-15)
    assert float(presence_hinge(np.array([0.1])).data) == pytest.approx(0.2)
    assert float(presence_hinge(np.array([0.9])).data) == 0.0
    assert float(presence_hinge(np.array([0.1, 0.9])).data) == pytest.approx(0.1)


# -- edge matching ----------------------------------------------------------


def test_edge_constant_mask_zero(rng):
    x = rng.uniform(size=(2, 12, 12, 3))
    assert float(edge_matching(np.full((2, 12, 12), 0.7), x, 10.0).data) == 0.0


def test_edge_zeta_zero_is_total_variation(rng):
    m = rng.uniform(size=(3, 10, 10))
    x = rng.uniform(size=(3, 10, 10, 3))
    mp = np.pad(m, ((0, 0), (1, 1), (1, 1)), mode="reflect")
    tv = np.abs(mp[:, 1:-1, 2:] - mp[:, 1:-1, :-2]) / 2 + np.abs(mp[:, 2:, 1:-1] - mp[:, :-2, 1:-1]) / 2
    assert float(edge_matching(m, x, 0.0).data) == pytest.approx(tv.sum((1, 2)).mean(), rel=1e-12)


def test_edge_on_image_edge_scores_lower():
    x = np.zeros((1, 16, 16, 3))
    x[:, :, 8:] = 1.0  # strong vertical edge at column 8
    on_edge = np.zeros((1, 16, 16))
    on_edge[:, :, 8:] = 1.0
    flat = np.zeros((1, 16, 16))
    flat[:, :, 3:] = 1.0  # same mask edge, but over a flat image region
    assert float(edge_matching(on_edge, x, 10.0).data) < 0.5 * float(edge_matching(flat, x, 10.0).data)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000))
def test_edge_invariant_to_mask_inversion(seed):
    rng = np.random.default_rng(seed)
    m, x = rng.uniform(size=(2, 8, 9)), rng.uniform(size=(2, 8, 9, 3))
    a = float(edge_matching(m, x, 5.0).data)
    assert float(edge_matching(1 - m, x, 5.0).data) == pytest.approx(a, rel=1e-12)


def test_edge_gradient(rng):
    from objvid3d.autodiff.gradcheck import check

    m = ad.tensor(rng.uniform(0.1, 0.9, size=(1, 6, 6)), requires_grad=True)
    x = rng.uniform(size=(1, 6, 6, 3))
    assert check(lambda: edge_matching(m, x, 3.0), [m], h=1e-6) < 1e-5


# -- total ------------------------------------------------------------------


def _setup(beta=1.0, **loss_kw):
    cfg = ModelConfig.toy(voxel_res=4, height=16, width=16, grid=(2, 1, 1), frames=2)
    model = SceneModel(cfg, seed=0)
    cams = [CameraTrack.from_fov(np.stack([np.eye(4)] * 2), 16, 16) for _ in range(2)]
    phi = model.encode_camera(cams)
    loss_cfg = LossConfig(beta_initial=beta, beta_final=beta, **loss_kw)
    return model, cams, phi, loss_cfg


def test_total_zero_at_perfect_fit():
    zero = dict(velocity=0, presence_hinge=0, crease_bg=0, edge_var_bg=0)
    model, cams, phi, loss_cfg = _setup(**zero)
    post = PosteriorGaussian(ad.zeros((2, model.cfg.d)), ad.ones((2, model.cfg.d)))
    params = model.decode(reparameterize(post, np.zeros((2, model.cfg.d))), phi)
    render = model.render(params, cams)
    out = total_loss(render.output.rgb.data, render, post, params, model, loss_cfg)
    assert float(out.total.data) == 0.0


def test_total_breakdown_and_beta(rng):
    model, cams, phi, loss_cfg = _setup(beta=1.0, edge_matching=0.5, presence_hinge=2.0)
    d = model.cfg.d
    post = PosteriorGaussian(ad.tensor(rng.normal(size=(2, d))), ad.tensor(rng.uniform(0.5, 2, (2, d))))
    params = model.decode(reparameterize(post, rng.normal(size=(2, d))), phi)
    render = model.render(params, cams)
    x = rng.uniform(size=(2, 2, 16, 16, 3))
    one = total_loss(x, render, post, params, model, loss_cfg)
    v = one.values()
    expected = v["nll"] + v["kl"] + v["velocity"] + 2 * v["presence"] + 10 * v["crease_bg"] + 10 * v["edge_var_bg"]
    expected += 0.5 * v["edge_matching"]
    assert v["total"] == pytest.approx(expected, rel=1e-12)
    assert all(v[k] >= 0 for k in LossLog.COLUMNS[2:])
    two = total_loss(x, render, post, params, model, LossConfig(beta_initial=2, beta_final=2, edge_matching=0.5, presence_hinge=2.0))
    assert two.values()["total"] - v["total"] == pytest.approx(v["kl"], rel=1e-9)


def test_beta_schedule():
    cfg = LossConfig(beta_initial=0.5, beta_final=2.0)
    assert cfg.beta(0, 100) == 0.5
    assert cfg.beta(25, 100) == pytest.approx(1.25)
    assert cfg.beta(50, 100) == 2.0 and cfg.beta(99, 100) == 2.0
    assert LossConfig().beta(10, 100) == 1.0


def test_total_gradients_finite_for_every_group(rng):
    for rep in ("voxel", "mesh"):
        cfg = ModelConfig.toy(voxel_res=4, height=16, width=16, grid=(2, 1, 1), frames=2, representation=rep)
        model = SceneModel(cfg, seed=1)
        cams = [CameraTrack.from_fov(np.stack([np.eye(4)] * 2), 16, 16) for _ in range(2)]
        x = rng.uniform(size=(2, 2, 16, 16, 3))
        phi = model.encode_camera(cams)
        post = model.encode_video(x, phi)
        params = model.decode(reparameterize(post, rng.normal(size=(2, cfg.d))), phi)
        render = model.render(params, cams)
        loss_cfg = LossConfig.mesh_rooms() if rep == "mesh" else LossConfig(edge_matching=1.0)
        total_loss(x, render, post, params, model, loss_cfg).total.backward()
        for name, p in model.store.params.items():
            assert p.grad is not None, name
            assert np.isfinite(p.grad).all(), name


def test_non_finite_term_flagged(rng):
    model, cams, phi, loss_cfg = _setup()
    d = model.cfg.d
    post = PosteriorGaussian(ad.zeros((2, d)), ad.ones((2, d)))
    params = model.decode(np.zeros((2, d)), phi)
    render = model.render(params, cams)
    x = np.full((2, 2, 16, 16, 3), np.nan)
    with pytest.raises(NonFiniteLoss) as info:
        total_loss(x, render, post, params, model, loss_cfg)
    assert info.value.term == "nll"


def test_loss_log_round_trip(tmp_path):
    log = LossLog(tmp_path / "log.csv")
    log.append(1, {"nll": 2.0, "total": 3.0, "beta": 1.0})
    log.append(2, {"nll": 1.0, "total": 1.5, "beta": 1.0})
    LossLog(tmp_path / "log.csv")  # reopening keeps existing rows
    rows = LossLog.read(tmp_path / "log.csv")
    assert [r["step"] for r in rows] == [1, 2]
    assert rows[1]["total"] == 1.5
