import numpy as np
import pytest

from streamfields import grad
from streamfields.fields import (
    Mlp,
    MlpSpec,
    ModelConfig,
    Probabilities,
    RadianceSample,
    SceneModel,
    encoded_dim,
    freq_encode,
)


def small_config(**kw):
    base = dict(mode="direct-2d", dims=(6, 6), F=3, k=1, T=4,
                decomp_hidden=(8,), stat_hidden=(8,), deform_hidden=(8,),
                color_hidden=(8,), pos_levels=2, def_time_levels=1,
                stat_time_levels=1, seed=0)
    base.update(kw)
    return ModelConfig(**base)


def small_3d_config(**kw):
    base = dict(mode="volumetric-3d", dims=(5, 5, 5), F=3, k=1, T=3,
                decomp_hidden=(8,), stat_hidden=(8,), deform_hidden=(8,),
                radiance_hidden=(8,), pos_levels=2, def_time_levels=1,
                stat_time_levels=1, dir_levels=2, seed=0)
    base.update(kw)
    return ModelConfig(**base)


def zero_mlp(mlp):
    for w, b in mlp.layers:
        w.data[:] = 0.0
        b.data[:] = 0.0


def pin_logits(model, bias):
    """Force the decomposition decoder to constant logits."""
    zero_mlp(model.decomp_mlp)
    model.decomp_mlp.layers[-1][1].data[:] = bias


# ---------------------------------------------------------------------------
# types


def test_probabilities_validation():
    Probabilities(0.5, 0.25, 0.25)
    with pytest.raises(ValueError, match="sum"):
        Probabilities(0.5, 0.5, 0.5)
    with pytest.raises(ValueError, match="0,1"):
        Probabilities(1.5, -0.5, 0.0)


def test_radiance_sample_validation():
    RadianceSample(0.0, (0.1, 0.2, 0.3))
    with pytest.raises(ValueError, match="density"):
        RadianceSample(-1.0, (0, 0, 0))
    with pytest.raises(ValueError, match="rgb"):
        RadianceSample(1.0, (0, 0, 2.0))


def test_freq_encode_shapes():
    assert freq_encode([[0.5, 0.5]], 0).shape == (1, 0)
    assert freq_encode([[0.5, 0.5]], 3).shape == (1, 2 * 7)
    assert encoded_dim(2, 3) == 14
    # raw component is kept at level >= 1
    enc = freq_encode([[0.25]], 1)
    np.testing.assert_allclose(
        enc, [[0.25, np.sin(0.25 * np.pi), np.cos(0.25 * np.pi)]])


# ---------------------------------------------------------------------------
# decompose


def test_decompose_uniform_logits():
    m = SceneModel(small_config())
    pin_logits(m, np.zeros(3))
    p = m.decompose_point(np.array([[0.3, 0.7]]), 1.0)
    assert abs(p.static - 1 / 3) < 1e-12
    assert abs(p.deform - 1 / 3) < 1e-12


def test_decompose_saturation():
    m = SceneModel(small_config())
    pin_logits(m, np.array([60.0, -60.0, -60.0]))
    p = m.decompose_point(np.array([[0.3, 0.7]]), 0.0)
    assert p.static == 1.0


def test_decompose_softmax_arithmetic():
    m = SceneModel(small_config())
    pin_logits(m, np.array([1.0, 0.0, 0.0]))
    p = m.decompose_point(np.array([[0.3, 0.7]]), 2.0)
    e = np.e
    assert abs(p.static - e / (e + 2)) < 1e-12
    assert abs(p.deform - 1 / (e + 2)) < 1e-12


def test_decompose_simplex_random_models():
    for seed in range(3):
        m = SceneModel(small_config(seed=seed))
        rng = np.random.default_rng(seed)
        pts = rng.uniform(0, 1, size=(20, 2))
        probs = m.decompose(pts, float(rng.uniform(0, m.config.T - 1))).data
        assert (probs >= 0).all() and (probs <= 1).all()
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)


def test_decompose_ablation_exact_zero():
    m = SceneModel(small_config())
    m.ablate = "no-new"
    probs = m.decompose(np.array([[0.2, 0.2], [0.8, 0.8]]), 1.0).data
    assert (probs[:, 2] == 0.0).all()
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)


# ---------------------------------------------------------------------------
# stationary field


def test_stationary_zero_everything():
    m = SceneModel(small_config())
    m.V_s.storage.data[:] = 0.0
    zero_mlp(m.stat_mlp)
    out = m.stationary_feature(np.array([[0.4, 0.4]]), 1.0).data
    np.testing.assert_array_equal(out, np.zeros((1, 3)))


def test_stationary_time_ablated_is_invariant():
    m = SceneModel(small_config(stat_time_levels=0))
    p = np.array([[0.3, 0.6]])
    a = m.stationary_feature(p, 0.0).data
    b = m.stationary_feature(p, 3.0).data
    np.testing.assert_array_equal(a, b)


def test_stationary_identity_decoder_reproduces_node():
    cfg = small_config(stat_time_levels=0, stat_hidden=(6,))
    m = SceneModel(cfg)
    F = cfg.F
    # relu(x) - relu(-x) == x: hidden = [x; -x], output subtracts
    w0 = np.concatenate([np.eye(F), -np.eye(F)], axis=1)
    w1 = np.concatenate([np.eye(F), -np.eye(F)], axis=0)
    m.stat_mlp.layers[0][0].data[:] = w0
    m.stat_mlp.layers[0][1].data[:] = 0.0
    m.stat_mlp.layers[1][0].data[:] = w1
    m.stat_mlp.layers[1][1].data[:] = 0.0
    node = np.array([[2 / 5, 3 / 5]])  # node (2,3) of the 6x6 grid
    out = m.stationary_feature(node, 0.0).data[0]
    np.testing.assert_allclose(out, m.V_s.storage.data[2 * 6 + 3, :F],
                               atol=1e-12)


# ---------------------------------------------------------------------------
# deformation field


def test_deform_zero_at_init():
    m = SceneModel(small_config())
    pts = np.random.default_rng(0).uniform(0, 1, (7, 2))
    for t in (0.0, 1.5, 3.0):
        np.testing.assert_array_equal(m.deform(pts, t).data, np.zeros((7, 2)))


def test_deform_init_makes_branches_identical():
    m = SceneModel(small_config())
    pin_logits(m, np.zeros(3))
    p = np.random.default_rng(1).uniform(0, 1, (5, 2))
    static = m.stationary_feature(p, 2.0).data
    delta = m.deform(p, 2.0)
    q = grad.clamp(grad.add(grad.constant(p), delta), 0.0, 1.0)
    warped = m.stationary_feature(q, 2.0).data
    np.testing.assert_array_equal(static, warped)


def test_deform_gradient_check():
    m = SceneModel(small_config())
    rng = np.random.default_rng(2)
    m.deform_mlp.layers[-1][0].data[:] = rng.normal(0, 0.1, size=(8, 2))
    pts = rng.uniform(0.1, 0.9, (4, 2))

    def f(_):
        d = m.deform(pts, 1.0)
        return grad.tsum(grad.mul(d, d))

    err = grad.finite_diff_check(f, m.deform_mlp.parameters(), max_coords=12,
                                 rng=np.random.default_rng(3))
    assert err < 1e-6


def test_deform_single_linear_layer_linear_in_t():
    cfg = small_config(deform_hidden=(), pos_levels=1, def_time_levels=1)
    m = SceneModel(cfg)
    (w, b) = m.deform_mlp.layers[0]
    w.data[:] = 0.0
    b.data[:] = 0.0
    t_raw_col = encoded_dim(2, cfg.pos_levels)  # first time channel is raw t
    w.data[t_raw_col, 0] = 0.9
    pts = np.array([[0.5, 0.5]])
    d1 = m.deform(pts, 1.0).data[0, 0]
    d2 = m.deform(pts, 2.0).data[0, 0]
    d3 = m.deform(pts, 3.0).data[0, 0]
    assert abs((d3 - d2) - (d2 - d1)) < 1e-12
    assert abs(d3 - 0.9 * 1.0) < 1e-12  # t=3 -> unit time 1.0


# ---------------------------------------------------------------------------
# newness field


def test_newness_zero_grid():
    m = SceneModel(small_config())
    m.V_n.storage.data[:] = 0.0
    out = m.newness_feature(np.array([[0.2, 0.9]]), 1.7).data
    np.testing.assert_array_equal(out, np.zeros((1, 3)))


def test_newness_observed_frame_exact():
    m = SceneModel(small_config())
    p = np.array([[0.25, 0.75]])
    direct = m.V_n.sample_spatial(p, m.V_n.window(2)).data
    np.testing.assert_array_equal(m.newness_feature(p, 2.0).data, direct)


# ---------------------------------------------------------------------------
# blend


def test_blend_one_hot_static():
    m = SceneModel(small_config())
    pin_logits(m, np.array([60.0, -60.0, -60.0]))
    p = np.array([[0.3, 0.4], [0.9, 0.1]])
    v, probs = m.blended_feature(p, 1.0, tau=1e-3)
    np.testing.assert_array_equal(v.data, m.stationary_feature(p, 1.0).data)
    assert probs.data[0, 0] == 1.0


def test_blend_one_hot_new():
    m = SceneModel(small_config())
    pin_logits(m, np.array([-60.0, -60.0, 60.0]))
    p = np.array([[0.3, 0.4]])
    v, _ = m.blended_feature(p, 2.0, tau=1e-3)
    np.testing.assert_array_equal(v.data, m.newness_feature(p, 2.0).data)


def test_blend_skip_threshold_difference():
    m = SceneModel(small_config())
    p_new = 5e-4
    rest = (1.0 - p_new) / 2.0
    pin_logits(m, np.log(np.array([rest, rest, p_new])))
    p = np.random.default_rng(4).uniform(0, 1, (6, 2))
    full, probs = m.blended_feature(p, 1.0, tau=0.0)
    skipped, _ = m.blended_feature(p, 1.0, tau=1e-3)
    new_part = m.newness_feature(p, 1.0).data * probs.data[:, 2:3]
    np.testing.assert_allclose(full.data - skipped.data, new_part, atol=1e-15)


def test_blend_skip_error_bound():
    for seed in range(3):
        m = SceneModel(small_config(seed=seed))
        rng = np.random.default_rng(seed + 10)
        p = rng.uniform(0, 1, (8, 2))
        tau = 0.4  # large enough to actually skip branches
        full, probs = m.blended_feature(p, 1.5, tau=0.0)
        cut, _ = m.blended_feature(p, 1.5, tau=tau)
        branch_feats = [
            m.stationary_feature(p, 1.5).data,
            None,  # deform branch equals static at init
            m.newness_feature(p, 1.5).data,
        ]
        branch_feats[1] = branch_feats[0]
        bound = np.zeros(8)
        for c in range(3):
            skipped = probs.data[:, c] < tau
            bound += skipped * probs.data[:, c] * np.abs(
                branch_feats[c]).max(axis=1)
        gap = np.abs(full.data - cut.data).max(axis=1)
        assert (gap <= bound + 1e-12).all()
        assert (gap <= 2 * tau * max(np.abs(b).max() for b in branch_feats)
                + 1e-12).all()


# ---------------------------------------------------------------------------
# decoders


def test_decode_radiance_zero_weights():
    m = SceneModel(small_3d_config())
    zero_mlp(m.radiance_mlp)
    v = grad.constant(np.zeros((1, 3)))
    s = m.decode_radiance_point(v, np.array([0.0, 0.0, -1.0]))
    assert abs(s.sigma - np.log(2.0)) < 1e-12
    np.testing.assert_allclose(s.rgb, (0.5, 0.5, 0.5), atol=1e-12)


def test_decode_radiance_rejects_nonunit_direction():
    m = SceneModel(small_3d_config())
    with pytest.raises(ValueError, match="unit"):
        m.decode_radiance(grad.constant(np.zeros((1, 3))),
                          np.array([[0.0, 0.0, -2.0]]))


def test_sigma_nonnegative_random():
    rng = np.random.default_rng(5)
    m = SceneModel(small_3d_config(seed=3))
    dirs = rng.normal(size=(20, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    v = grad.constant(rng.normal(size=(20, 3)))
    sigma, rgb = m.decode_radiance(v, dirs)
    assert (sigma.data >= 0).all()
    assert (rgb.data >= 0).all() and (rgb.data <= 1).all()


def test_direct_color_zero_weights():
    m = SceneModel(small_config())
    zero_mlp(m.color_mlp)
    out = m.direct_color(grad.constant(np.zeros((2, 3)))).data
    np.testing.assert_allclose(out, 0.5, atol=1e-15)


def test_direct_color_range_and_mode_check():
    m = SceneModel(small_config())
    rng = np.random.default_rng(6)
    out = m.direct_color(grad.constant(rng.normal(size=(10, 3)))).data
    assert (out > 0).all() and (out < 1).all()
    m3 = SceneModel(small_3d_config())
    with pytest.raises(ValueError, match="direct-2d"):
        m3.direct_color(grad.constant(np.zeros((1, 3))))
    with pytest.raises(ValueError, match="volumetric"):
        m.decode_radiance(grad.constant(np.zeros((1, 3))),
                          np.array([[0.0, 0.0, 1.0]]))


# ---------------------------------------------------------------------------
# full chain gradient


def test_full_chain_gradient_2d():
    m = SceneModel(small_config(seed=7))
    rng = np.random.default_rng(7)
    # give the deformation a real output so its path carries gradient
    m.deform_mlp.layers[-1][0].data[:] = rng.normal(
        0, 0.05, m.deform_mlp.layers[-1][0].shape)
    pts = rng.uniform(0.1, 0.9, (5, 2))
    gt = rng.uniform(0, 1, (5, 3))

    def f(_):
        v, probs = m.blended_feature(pts, 1.3, tau=0.0)
        c = m.direct_color(v)
        err = grad.sub(c, grad.constant(gt))
        return grad.add(grad.tmean(grad.mul(err, err)),
                        grad.tmean(probs))

    params = m.parameters()
    err = grad.finite_diff_check(f, params, max_coords=6,
                                 rng=np.random.default_rng(8))
    assert err < 1e-5
