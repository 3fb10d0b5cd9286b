import numpy as np
import pytest

from streamfields import grad, train
from streamfields.scenes import default_toy_spec, gen_toy2d
from streamfields.train import (
    Adam,
    TrainConfig,
    alpha_at,
    fit,
    parsimony_loss,
    reconstruction_loss,
    sample_batch,
    total_loss,
)


def toy_dataset(T=6, seed=0, size=48):
    return gen_toy2d(default_toy_spec(width=size, height=size, T=T, seed=seed))


def quick_config(**kw):
    base = dict(batch_size=64, steps=4, grid_size=12, F=3,
                pos_levels=2, def_time_levels=1, stat_time_levels=1,
                seed=0)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# losses


def test_reconstruction_loss_values():
    zero = grad.constant(np.zeros((1, 3)))
    assert reconstruction_loss(zero, np.zeros((1, 3))).item() == 0.0
    one = grad.constant(np.array([[1.0, 0, 0]]))
    assert reconstruction_loss(one, np.zeros((1, 3))).item() == 1.0
    two = grad.constant(np.array([[1.0, 0, 0], [0, 0, 0]]))
    assert reconstruction_loss(two, np.zeros((2, 3))).item() == 0.5


def test_reconstruction_loss_count_mismatch():
    with pytest.raises(ValueError, match="reconstruction_loss"):
        reconstruction_loss(grad.constant(np.zeros((2, 3))), np.zeros((3, 3)))


def test_parsimony_loss_values():
    allstatic = np.tile([1.0, 0, 0], (4, 1))
    assert parsimony_loss(allstatic, 0.01).item() == 0.0
    alldeform = np.tile([0, 1.0, 0], (4, 1))
    assert abs(parsimony_loss(alldeform, 0.01).item() - 0.01) < 1e-15
    mixed = np.array([[0, 1.0, 0], [0, 0, 1.0]])
    assert abs(parsimony_loss(mixed, 0.01).item() - 0.505) < 1e-15


def test_parsimony_loss_validates():
    with pytest.raises(ValueError, match="nonempty"):
        parsimony_loss(np.zeros((0, 3)), 0.01)
    with pytest.raises(ValueError, match="simplex"):
        parsimony_loss(np.array([[0.5, 0.4, 0.3]]), 0.01)


def test_parsimony_alpha_monotone():
    rng = np.random.default_rng(0)
    raw = rng.uniform(0, 1, (32, 3))
    probs = raw / raw.sum(axis=1, keepdims=True)
    vals = [parsimony_loss(probs, a).item() for a in (0.0, 0.01, 0.5, 1.0, 3.0)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_total_loss_values():
    rec = grad.constant(np.asarray(1.0))
    reg = grad.constant(np.asarray(0.0))
    assert total_loss(rec, reg, 0.7).item() == 1.0
    rec2 = grad.constant(np.asarray(0.5))
    reg2 = grad.constant(np.asarray(0.505))
    assert abs(total_loss(rec2, reg2, 0.1).item() - 0.5505) < 1e-15
    assert total_loss(rec2, reg2, 0.0).item() == rec2.item()


def test_loss_decomposition_identity():
    rng = np.random.default_rng(1)
    pred = grad.constant(rng.uniform(0, 1, (16, 3)))
    gt = rng.uniform(0, 1, (16, 3))
    raw = rng.uniform(0, 1, (16, 3))
    probs = raw / raw.sum(axis=1, keepdims=True)
    lam, alpha = 0.1, 0.37
    rec = reconstruction_loss(pred, gt)
    reg = parsimony_loss(probs, alpha)
    total = total_loss(rec, reg, lam)
    by_hand = rec.item() + lam * (alpha * probs[:, 1].mean()
                                  + probs[:, 2].mean())
    assert abs(total.item() - by_hand) < 1e-12


# ---------------------------------------------------------------------------
# alpha schedule


def test_alpha_schedule_endpoints_and_midpoint():
    cfg = quick_config(steps=100, alpha_start=1.0, alpha_end=0.01,
                       alpha_decay_steps=50)
    assert alpha_at(cfg, 0) == 1.0
    assert abs(alpha_at(cfg, 25) - 0.1) < 1e-12  # sqrt(1 * 0.01)
    assert abs(alpha_at(cfg, 50) - 0.01) < 1e-12
    assert abs(alpha_at(cfg, 99) - 0.01) < 1e-12


def test_alpha_schedule_zero_end_linear():
    cfg = quick_config(alpha_start=1.0, alpha_end=0.0, alpha_decay_steps=10)
    assert alpha_at(cfg, 5) == 0.5
    assert alpha_at(cfg, 10) == 0.0


def test_config_validation():
    with pytest.raises(ValueError, match="lambda"):
        TrainConfig(lambda_reg=-1)
    with pytest.raises(ValueError, match="alpha"):
        TrainConfig(alpha_start=0.1, alpha_end=0.5)
    with pytest.raises(ValueError, match="clip"):
        TrainConfig(clip_length=0)


# ---------------------------------------------------------------------------
# optimizer


def test_adam_first_step_magnitude():
    p = grad.parameter(np.zeros(5))
    opt = Adam([p])
    opt.step({p: np.ones(5)}, lr=0.01)
    np.testing.assert_allclose(p.data, -0.01, rtol=1e-7)


def test_adam_ignores_missing_grads():
    p = grad.parameter(np.ones(3))
    q = grad.parameter(np.ones(3))
    opt = Adam([p, q])
    opt.step({p: np.ones(3)}, lr=0.1)
    np.testing.assert_array_equal(q.data, np.ones(3))


# ---------------------------------------------------------------------------
# batching


def test_sample_batch_single_pixel():
    ds = toy_dataset(T=2, size=48)
    one = gen_toy2d(default_toy_spec(width=48, height=48, T=2, seed=0))
    # restrict to one training frame and check determinism
    rng1 = np.random.default_rng(5)
    rng2 = np.random.default_rng(5)
    a = sample_batch(ds, rng1, 16)
    b = sample_batch(ds, rng2, 16)
    assert np.array_equal(a.points, b.points)
    assert np.array_equal(a.gt, b.gt)
    del one


def test_sample_batch_near_uniform_over_frames():
    ds = toy_dataset(T=10, size=32)
    rng = np.random.default_rng(6)
    batch = sample_batch(ds, rng, 100_000)
    counts = np.array([(batch.times == t).sum()
                       for t in ds.train_frames])
    expected = 100_000 / len(ds.train_frames)
    assert np.abs(counts - expected).max() < 0.05 * expected


def test_sample_batch_gt_matches_frames():
    ds = toy_dataset(T=4, size=32)
    batch = sample_batch(ds, np.random.default_rng(7), 50)
    h, w = ds.frames.shape[1:3]
    for i in range(50):
        x = int(batch.points[i, 0] * w - 0.5)
        y = int(batch.points[i, 1] * h - 0.5)
        np.testing.assert_array_equal(batch.gt[i],
                                      ds.frames[int(batch.times[i]), y, x])


# ---------------------------------------------------------------------------
# steps and fit


def test_train_step_decreases_loss_trend():
    ds = toy_dataset(T=4, size=32)
    cfg = quick_config(steps=220, batch_size=128, grid_size=16)
    res = fit(ds, cfg, log_every=10)
    curve = res.curves[0]
    first = np.mean([p.total for p in curve[:2]])
    last = np.mean([p.total for p in curve[-2:]])
    assert last < first


def test_lambda_zero_drops_parsimony_gradient():
    ds = toy_dataset(T=2, size=32)
    cfg0 = quick_config(lambda_reg=0.0, steps=1)
    from streamfields.train import _forward_batch
    from streamfields.fields import SceneModel

    model = SceneModel(cfg0.model_config("direct-2d", 2))
    rng = np.random.default_rng(0)
    batch = sample_batch(ds, rng, 32)
    pred, probs = _forward_batch(model, batch, cfg0, rng)
    rec = reconstruction_loss(pred, batch.gt)
    reg = parsimony_loss(probs, 0.5)
    params = model.parameters()
    g_rec = grad.backward(rec, params=params)
    g_tot = grad.backward(total_loss(rec, reg, 0.0), params=params)
    for p in params:
        np.testing.assert_array_equal(g_rec[p], g_tot[p])


def test_fit_clip_split():
    ds = toy_dataset(T=6, size=32)
    cfg = quick_config(steps=2, clip_length=90)
    res = fit(ds, cfg)
    assert len(res.models) == 1

    cfg2 = quick_config(steps=2, clip_length=3)
    res2 = fit(ds, cfg2)
    assert len(res2.models) == 2
    assert res2.clip_ranges == [(0, 3), (3, 6)]
    assert res2.models[0].config.T == 3
    m, local_t = res2.model_for_frame(4)
    assert m is res2.models[1] and local_t == 1


def test_fit_long_sequence_default_clip_length():
    # 180 frames at the default 90-frame clip length -> two models
    ds = toy_dataset(T=180, size=32)
    cfg = quick_config(steps=1, batch_size=8, clip_length=90)
    res = fit(ds, cfg)
    assert len(res.models) == 2
    assert res.clip_ranges == [(0, 90), (90, 180)]
    assert all(m.config.T == 90 for m in res.models)


def test_fit_deterministic_bits():
    ds = toy_dataset(T=3, size=32)
    cfg = quick_config(steps=6, batch_size=32)
    r1 = fit(ds, cfg)
    r2 = fit(ds, cfg)
    for p1, p2 in zip(r1.models[0].parameters(), r2.models[0].parameters()):
        assert np.array_equal(p1.data, p2.data)


def test_gradient_of_total_loss_random_subset():
    ds = toy_dataset(T=3, size=32)
    cfg = quick_config()
    from streamfields.fields import SceneModel

    model = SceneModel(cfg.model_config("direct-2d", 3))
    rng = np.random.default_rng(3)
    model.deform_mlp.layers[-1][0].data[:] = rng.normal(
        0, 0.05, model.deform_mlp.layers[-1][0].shape)
    batch = sample_batch(ds, rng, 24)

    def f(_):
        from streamfields.train import _forward_batch
        pred, probs = _forward_batch(model, batch, cfg,
                                     np.random.default_rng(0))
        rec = reconstruction_loss(pred, batch.gt)
        return total_loss(rec, parsimony_loss(probs, 0.3), 0.1)

    params = [p for p in model.parameters()][:32]
    err = grad.finite_diff_check(f, params, max_coords=1,
                                 rng=np.random.default_rng(4))
    assert err < 1e-5


def test_divergence_reported():
    ds = toy_dataset(T=2, size=32)
    cfg = quick_config(steps=1)
    from streamfields.fields import SceneModel

    model = SceneModel(cfg.model_config("direct-2d", 2))
    model.color_mlp.layers[0][0].data[:] = np.nan
    opt = Adam(model.parameters())
    rng = np.random.default_rng(0)
    batch = sample_batch(ds, rng, 8)
    with pytest.raises(train.TrainingDiverged, match="step 0"):
        train.train_step(model, batch, opt, cfg, 0, rng)


# ---------------------------------------------------------------------------
# config file io


def test_config_roundtrip(tmp_path):
    cfg = quick_config(lr=0.002, k="0.5", backbone="cp", rank=4)
    path = tmp_path / "train.cfg"
    train.save_config(path, cfg)
    back = train.load_config(path)
    assert back == cfg


def test_config_rejects_unknown_key(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("steps = 10\nbogus = 3\n")
    with pytest.raises(ValueError, match="bogus"):
        train.load_config(path)


def test_config_overrides(tmp_path):
    path = tmp_path / "train.cfg"
    train.save_config(path, quick_config())
    cfg = train.load_config(path, overrides={"steps": "9", "lr": "0.01"})
    assert cfg.steps == 9 and cfg.lr == 0.01


def test_loss_csv(tmp_path):
    ds = toy_dataset(T=2, size=32)
    cfg = quick_config(steps=3)
    res = fit(ds, cfg, log_every=1)
    path = tmp_path / "loss.csv"
    train.save_loss_csv(path, res.curves)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "clip,step,rec,reg,total,alpha"
    assert len(lines) == 1 + 3
