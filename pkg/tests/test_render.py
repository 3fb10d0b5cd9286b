import hashlib

import numpy as np
import pytest

from streamfields import render
from streamfields.fields import ModelConfig, SceneModel
from streamfields.render import (
    Camera,
    Ray,
    RenderConfig,
    bin_deltas,
    camera_from_lookat,
    composite,
    composite_graph,
    composite_samples,
    generate_ray,
    sample_points,
)
from streamfields.fields import RadianceSample
from streamfields import grad


def axis_aligned_camera(width=4, height=4, focal=100.0):
    pose = np.column_stack([np.eye(3), np.zeros(3)])
    return Camera(pose=pose, fx=focal, fy=focal,
                  cx=width / 2.0, cy=height / 2.0, width=width, height=height)


def tiny_model(seed=0):
    cfg = ModelConfig(mode="volumetric-3d", dims=(5, 5, 5), F=3, k=1, T=3,
                      decomp_hidden=(8,), stat_hidden=(8,), deform_hidden=(8,),
                      radiance_hidden=(8,), pos_levels=2, def_time_levels=1,
                      stat_time_levels=1, dir_levels=2, seed=seed)
    return SceneModel(cfg)


def params_digest(model):
    h = hashlib.sha256()
    for p in model.parameters():
        h.update(p.data.tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# cameras and rays


def test_camera_rejects_bad_rotation():
    pose = np.column_stack([np.eye(3) * 2.0, np.zeros(3)])
    with pytest.raises(ValueError, match="orthonormal"):
        Camera(pose=pose, fx=1, fy=1, cx=0, cy=0, width=2, height=2)


def test_principal_ray_points_forward():
    cam = axis_aligned_camera()
    ray = generate_ray(cam, (cam.cx, cam.cy))
    np.testing.assert_allclose(ray.direction, [0, 0, -1], atol=1e-12)


def test_symmetric_pixels_mirror_x():
    cam = axis_aligned_camera()
    a = generate_ray(cam, (cam.cx + 1.0, cam.cy)).direction
    b = generate_ray(cam, (cam.cx - 1.0, cam.cy)).direction
    np.testing.assert_allclose(a * [-1, 1, 1], b, atol=1e-12)


def test_focal_offset_geometry():
    cam = axis_aligned_camera(width=300, height=300, focal=100.0)
    ray = generate_ray(cam, (cam.cx + 100.0, cam.cy))
    expect = np.array([1.0, 0.0, -1.0]) / np.sqrt(2.0)
    np.testing.assert_allclose(ray.direction, expect, atol=1e-12)


def test_out_of_bounds_pixel():
    cam = axis_aligned_camera()
    with pytest.raises(ValueError, match="outside"):
        generate_ray(cam, (10.0, 0.0))


def test_ray_validation():
    with pytest.raises(ValueError, match="near < far"):
        Ray(np.zeros(3), np.array([0, 0, -1.0]), near=2.0, far=1.0)
    with pytest.raises(ValueError, match="unit"):
        Ray(np.zeros(3), np.array([0, 0, -2.0]), near=0.1, far=1.0)


def test_lookat_faces_target():
    cam = camera_from_lookat([0.5, 0.5, 3.0], [0.5, 0.5, 0.5], [0, 1, 0],
                             fov_deg=60, width=8, height=8)
    ray = generate_ray(cam, (cam.cx, cam.cy))
    np.testing.assert_allclose(ray.direction, [0, 0, -1], atol=1e-12)


# ---------------------------------------------------------------------------
# depth sampling


def test_sample_points_midpoints():
    ray = Ray(np.zeros(3), np.array([0, 0, -1.0]), near=0.0, far=1.0)
    np.testing.assert_allclose(sample_points(ray, 2), [0.25, 0.75])
    ray2 = Ray(np.zeros(3), np.array([0, 0, -1.0]), near=0.0, far=2.0)
    np.testing.assert_allclose(sample_points(ray2, 4),
                               [0.25, 0.75, 1.25, 1.75])


def test_sample_points_stratified_in_bins():
    ray = Ray(np.zeros(3), np.array([0, 0, -1.0]), near=0.5, far=2.5)
    rng = np.random.default_rng(0)
    for _ in range(20):
        d = sample_points(ray, 8, stratified=True, rng=rng)
        edges = np.linspace(0.5, 2.5, 9)
        assert ((d >= edges[:-1]) & (d <= edges[1:])).all()
        assert (np.diff(d) > 0).all()


def test_sample_points_needs_two():
    ray = Ray(np.zeros(3), np.array([0, 0, -1.0]), near=0.0, far=1.0)
    with pytest.raises(ValueError, match="at least 2"):
        sample_points(ray, 1)


# ---------------------------------------------------------------------------
# compositing


def test_composite_empty_space():
    rgb, opacity, w = composite(np.zeros(8), np.ones((8, 3)), np.full(8, 0.1))
    np.testing.assert_array_equal(rgb, 0.0)
    assert opacity == 0.0
    np.testing.assert_array_equal(w, 0.0)


def test_composite_homogeneous_closed_form():
    for n, tol in ((256, 1e-3), (2048, 1e-4)):
        deltas = bin_deltas(0.0, 1.0, n)
        rgb, opacity, _ = composite(np.ones(n),
                                    np.tile([1.0, 0, 0], (n, 1)), deltas)
        expect = 1.0 - np.exp(-1.0)
        assert abs(rgb[0] - expect) < tol
        assert abs(opacity - expect) < tol
        assert abs(rgb[0] - 0.63212) < 1e-3


def test_composite_opaque_first_sample():
    sig = np.array([1e6, 1.0, 1.0])
    rgbs = np.array([[0.2, 0.4, 0.6], [1, 1, 1], [1, 1, 1]])
    rgb, opacity, _ = composite(sig, rgbs, np.full(3, 0.5))
    np.testing.assert_allclose(rgb, [0.2, 0.4, 0.6], atol=1e-9)
    assert abs(opacity - 1.0) < 1e-9


def test_composite_rejects_bad_input():
    with pytest.raises(ValueError, match="negative density"):
        composite(np.array([-1.0]), np.ones((1, 3)), np.ones(1))
    with pytest.raises(ValueError, match="composite"):
        composite(np.ones(2), np.ones((3, 3)), np.ones(2))
    with pytest.raises(ValueError, match="positive"):
        composite(np.ones(1), np.ones((1, 3)), np.zeros(1))


def test_composite_samples_wrapper():
    samples = [RadianceSample(1.0, (1.0, 0.0, 0.0)) for _ in range(4)]
    a = composite_samples(samples, np.full(4, 0.25))
    b = composite(np.ones(4), np.tile([1.0, 0, 0], (4, 1)), np.full(4, 0.25))
    np.testing.assert_array_equal(a[0], b[0])


def test_composite_weights_simplex_bound():
    rng = np.random.default_rng(1)
    for _ in range(10):
        n = rng.integers(2, 30)
        sig = rng.uniform(0, 5, n)
        rgb, opacity, w = composite(sig, rng.uniform(0, 1, (n, 3)),
                                    rng.uniform(0.01, 0.5, n))
        assert (w >= 0).all()
        assert w.sum() <= 1.0 + 1e-12
        assert abs(w.sum() - opacity) < 1e-15


def test_composite_segment_split_telescoping():
    rng = np.random.default_rng(2)
    sig = rng.uniform(0.1, 3.0, 5)
    rgbs = rng.uniform(0, 1, (5, 3))
    deltas = rng.uniform(0.05, 0.4, 5)
    rgb_a, op_a, _ = composite(sig, rgbs, deltas)
    # split segment 2 into two halves with the same sigma and color
    sig2 = np.insert(sig, 3, sig[2])
    rgbs2 = np.insert(rgbs, 3, rgbs[2], axis=0)
    deltas2 = deltas.copy()
    deltas2[2] /= 2.0
    deltas2 = np.insert(deltas2, 3, deltas2[2])
    rgb_b, op_b, _ = composite(sig2, rgbs2, deltas2)
    np.testing.assert_allclose(rgb_a, rgb_b, atol=1e-12)
    assert abs(op_a - op_b) < 1e-12


def test_composite_graph_matches_numpy():
    rng = np.random.default_rng(3)
    n, s = 4, 16
    sig = rng.uniform(0, 3, n * s)
    rgbs = rng.uniform(0, 1, (n * s, 3))
    deltas = np.tile(bin_deltas(0.1, 2.0, s), (n, 1))
    colors, opacity, _ = composite_graph(grad.constant(sig),
                                         grad.constant(rgbs), deltas)
    for i in range(n):
        lo, hi = i * s, (i + 1) * s
        rgb, op, _ = composite(sig[lo:hi], rgbs[lo:hi], deltas[i])
        np.testing.assert_allclose(colors.data[i], rgb, atol=1e-12)
        assert abs(opacity.data[i] - op) < 1e-12


# ---------------------------------------------------------------------------
# full renders


def empty_space_model():
    m = tiny_model()
    # softplus(-1e4) underflows to exactly 0: empty scene
    m.radiance_mlp.layers[-1][0].data[:] = 0.0
    m.radiance_mlp.layers[-1][1].data[:] = [-1e4, 0, 0, 0]
    return m


def test_render_ray_empty_scene_is_background():
    m = empty_space_model()
    cfg = RenderConfig(n_samples=8, near=0.1, far=2.0,
                       background=(0.3, 0.6, 0.9))
    ray = Ray(np.array([0.5, 0.5, 2.0]), np.array([0, 0, -1.0]),
              near=0.1, far=2.0)
    np.testing.assert_array_equal(render.render_ray(m, ray, 1.0, cfg),
                                  [0.3, 0.6, 0.9])


def test_render_tau_skip_close_to_exact():
    m = tiny_model(seed=4)
    cam = camera_from_lookat([0.5, 0.5, 2.5], [0.5, 0.5, 0.5], [0, 1, 0],
                             fov_deg=45, width=6, height=6)
    cfg0 = RenderConfig(n_samples=12, near=1.0, far=3.0, tau=0.0)
    cfg1 = RenderConfig(n_samples=12, near=1.0, far=3.0, tau=1e-3)
    a = render.render_image(m, cam, 1.0, cfg0)
    b = render.render_image(m, cam, 1.0, cfg1)
    assert np.abs(a - b).max() < 1e-2


def test_render_quadrature_refinement():
    # depth range chosen inside the unit cube so the field is smooth along
    # the whole ray (the scene-bounds mask is a step at the cube faces)
    m = tiny_model(seed=5)
    cam = camera_from_lookat([0.5, 0.5, 2.5], [0.5, 0.5, 0.5], [0, 1, 0],
                             fov_deg=45, width=4, height=4)
    a = render.render_image(m, cam, 1.0, RenderConfig(n_samples=32,
                                                      near=1.55, far=2.45))
    b = render.render_image(m, cam, 1.0, RenderConfig(n_samples=64,
                                                      near=1.55, far=2.45))
    assert np.abs(a - b).max() < 1e-2


def test_render_image_matches_render_ray():
    m = tiny_model(seed=6)
    cam = camera_from_lookat([0.5, 0.5, 2.5], [0.5, 0.5, 0.5], [0, 1, 0],
                             fov_deg=45, width=2, height=2)
    cfg = RenderConfig(n_samples=8, near=1.0, far=3.0)
    img = render.render_image(m, cam, 0.0, cfg)
    for v in range(2):
        for u in range(2):
            ray = generate_ray(cam, (float(u), float(v)),
                               near=cfg.near, far=cfg.far)
            np.testing.assert_allclose(img[v, u],
                                       render.render_ray(m, ray, 0.0, cfg),
                                       atol=1e-12)


def test_render_image_deterministic_and_pure():
    m = tiny_model(seed=7)
    cam = camera_from_lookat([0.5, 0.5, 2.5], [0.5, 0.5, 0.5], [0, 1, 0],
                             fov_deg=45, width=4, height=4)
    cfg = RenderConfig(n_samples=8, near=1.0, far=3.0, stratified=True, seed=9)
    before = params_digest(m)
    a = render.render_image(m, cam, 1.0, cfg)
    b = render.render_image(m, cam, 1.0, cfg)
    assert np.array_equal(a, b)
    assert params_digest(m) == before


def test_decomposition_map_pinned_and_simplex():
    m = tiny_model(seed=8)
    for w, b in m.decomp_mlp.layers:
        w.data[:] = 0.0
        b.data[:] = 0.0
    m.decomp_mlp.layers[-1][1].data[:] = [60.0, -60.0, -60.0]
    cam = camera_from_lookat([0.5, 0.5, 2.5], [0.5, 0.5, 0.5], [0, 1, 0],
                             fov_deg=45, width=4, height=4)
    cfg = RenderConfig(n_samples=8, near=1.0, far=3.0)
    cmap = render.render_decomposition_map(m, cam, 1.0, cfg)
    np.testing.assert_allclose(cmap[..., 0], 1.0, atol=1e-12)
    np.testing.assert_allclose(cmap[..., 1:], 0.0, atol=1e-12)

    m2 = tiny_model(seed=9)
    cmap2 = render.render_decomposition_map(m2, cam, 1.0, cfg)
    np.testing.assert_allclose(cmap2.sum(axis=-1), 1.0, atol=1e-9)


def test_direct2d_image_and_map():
    cfg2 = ModelConfig(mode="direct-2d", dims=(6, 6), F=3, k=1, T=3,
                       decomp_hidden=(8,), stat_hidden=(8,),
                       deform_hidden=(8,), color_hidden=(8,),
                       pos_levels=2, seed=1)
    m = SceneModel(cfg2)
    cam = Camera(pose=np.column_stack([np.eye(3), np.zeros(3)]),
                 fx=1, fy=1, cx=4, cy=4, width=8, height=8)
    img = render.render_image(m, cam, 1.0, RenderConfig())
    assert img.shape == (8, 8, 3)
    assert (img >= 0).all() and (img <= 1).all()
    cmap = render.render_decomposition_map(m, cam, 1.0, RenderConfig())
    np.testing.assert_allclose(cmap.sum(axis=-1), 1.0, atol=1e-9)


# ---------------------------------------------------------------------------
# image io


def test_png_roundtrip(tmp_path):
    rng = np.random.default_rng(10)
    img = rng.uniform(0, 1, (5, 7, 3))
    path = tmp_path / "img.png"
    render.write_png(path, img)
    back = render.read_png(path)
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-9


def test_raw_roundtrip(tmp_path):
    rng = np.random.default_rng(11)
    img = rng.uniform(0, 1, (5, 7, 3)).astype(np.float32)
    path = tmp_path / "img.npy"
    render.write_raw(path, img)
    np.testing.assert_array_equal(render.read_raw(path), img.astype(np.float64))
