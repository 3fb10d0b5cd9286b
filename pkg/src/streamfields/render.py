"""Ray generation, stratified sampling and volume-rendering quadrature.

The integrator is the standard alpha-compositing discretization:
alpha_i = 1 - exp(-sigma_i * delta_i), T_i = prod_{j<i} (1 - alpha_j),
w_i = T_i * alpha_i.  Sample depths come from equal-length bins (midpoints
in deterministic mode, one uniform draw per bin in stratified mode) and the
deltas handed to the integrator are the full bin widths, which makes the
quadrature exact for homogeneous media.

Rendering only reads the model; per-pixel RNG streams are derived from
(seed, pixel, time) so images are reproducible under any scheduling.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from PIL import Image

from . import grad

__all__ = [
    "Camera",
    "Ray",
    "RenderConfig",
    "camera_from_lookat",
    "generate_ray",
    "pixel_rays",
    "sample_points",
    "bin_deltas",
    "composite",
    "composite_samples",
    "composite_graph",
    "render_rays",
    "render_ray",
    "render_image",
    "render_decomposition_map",
    "lattice_points",
    "write_png",
    "read_png",
    "write_raw",
    "read_raw",
]


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: 3x4 camera-to-world pose plus intrinsics."""

    pose: np.ndarray  # (3, 4), rotation | position
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        pose = np.asarray(self.pose, dtype=np.float64)
        if pose.shape != (3, 4):
            raise ValueError(f"pose must be 3x4, got {pose.shape}")
        r = pose[:, :3]
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-6:
            raise ValueError("camera rotation is not orthonormal")
        object.__setattr__(self, "pose", pose)

    @property
    def rotation(self):
        return self.pose[:, :3]

    @property
    def position(self):
        return self.pose[:, 3]


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float

    def __post_init__(self):
        if not self.near < self.far:
            raise ValueError(f"need near < far, got [{self.near}, {self.far}]")
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-6:
            raise ValueError("ray direction must be unit length")
        object.__setattr__(self, "origin",
                           np.asarray(self.origin, dtype=np.float64))
        object.__setattr__(self, "direction", d)


def camera_from_lookat(position, target, up, fov_deg, width, height):
    """Camera at `position` looking at `target`; forward is -z."""
    position = np.asarray(position, dtype=np.float64)
    z = position - np.asarray(target, dtype=np.float64)
    nz = np.linalg.norm(z)
    if nz < 1e-12:
        raise ValueError("camera position coincides with the look-at target")
    z = z / nz
    x = np.cross(np.asarray(up, dtype=np.float64), z)
    nx = np.linalg.norm(x)
    if nx < 1e-12:
        raise ValueError("up vector is parallel to the view direction")
    x = x / nx
    y = np.cross(z, x)
    pose = np.column_stack([x, y, z, position])
    focal = 0.5 * width / np.tan(0.5 * np.deg2rad(fov_deg))
    return Camera(pose=pose, fx=focal, fy=focal,
                  cx=width / 2.0, cy=height / 2.0,
                  width=width, height=height)


def _pixel_dirs(camera, us, vs):
    d_cam = np.stack([(us - camera.cx) / camera.fx,
                      -(vs - camera.cy) / camera.fy,
                      -np.ones_like(us)], axis=-1)
    d = d_cam @ camera.rotation.T
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def generate_ray(camera, pixel, near=0.1, far=4.0):
    """Back-project one continuous pixel (u, v) into a world ray."""
    u, v = float(pixel[0]), float(pixel[1])
    if not (-0.5 <= u <= camera.width - 0.5
            and -0.5 <= v <= camera.height - 0.5):
        raise ValueError(
            f"pixel ({u}, {v}) outside {camera.width}x{camera.height} image")
    d = _pixel_dirs(camera, np.array([u]), np.array([v]))[0]
    return Ray(origin=camera.position.copy(), direction=d, near=near, far=far)


def pixel_rays(camera, pixels=None):
    """Origins and unit directions for pixel centers (or given (u, v) rows)."""
    if pixels is None:
        vs, us = np.meshgrid(np.arange(camera.height, dtype=np.float64),
                             np.arange(camera.width, dtype=np.float64),
                             indexing="ij")
        us, vs = us.ravel(), vs.ravel()
    else:
        pixels = np.asarray(pixels, dtype=np.float64)
        us, vs = pixels[:, 0], pixels[:, 1]
    dirs = _pixel_dirs(camera, us, vs)
    origins = np.broadcast_to(camera.position, dirs.shape).copy()
    return origins, dirs


def sample_points(ray, n, stratified=False, rng=None):
    """n strictly increasing depths, one per equal-length bin of [near, far]."""
    if n < 2:
        raise ValueError(f"need at least 2 samples per ray, got {n}")
    edges = np.linspace(ray.near, ray.far, n + 1)
    if stratified:
        if rng is None:
            rng = np.random.default_rng(0)
        return edges[:-1] + rng.uniform(0.0, 1.0, n) * np.diff(edges)
    return 0.5 * (edges[:-1] + edges[1:])


def bin_deltas(near, far, n):
    return np.full(n, (far - near) / n)


def composite(sigmas, rgbs, deltas):
    """Quadrature weights and color for one ray.

    Returns (rgb, opacity, weights).  sigmas (S,), rgbs (S, 3), deltas (S,).
    """
    sigmas = np.asarray(sigmas, dtype=np.float64)
    rgbs = np.asarray(rgbs, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    if not (sigmas.shape[0] == rgbs.shape[0] == deltas.shape[0]):
        raise ValueError(
            f"composite: got {sigmas.shape[0]} densities, {rgbs.shape[0]} "
            f"colors, {deltas.shape[0]} deltas")
    if (sigmas < 0).any():
        raise ValueError("composite: negative density violates the sample "
                         "invariant")
    if (deltas <= 0).any():
        raise ValueError("composite: segment lengths must be positive")
    alphas = 1.0 - np.exp(-sigmas * deltas)
    trans = np.cumprod(np.concatenate([[1.0], 1.0 - alphas[:-1]]))
    weights = trans * alphas
    return weights @ rgbs, weights.sum(), weights


def composite_samples(samples, deltas):
    """composite() over a list of RadianceSample records."""
    sigmas = np.array([s.sigma for s in samples])
    rgbs = np.array([s.rgb for s in samples])
    return composite(sigmas, rgbs, deltas)


def composite_graph(sigma, rgb, deltas):
    """Differentiable batched compositing.

    sigma is a flat (N*S,) Tensor, rgb (N*S, 3), deltas a constant (N, S)
    array.  Transmittance uses exp(-cumsum(sigma*delta)), identical to the
    (1 - alpha) product.  Returns (colors (N, 3), opacity (N,), weights).
    """
    n, s = deltas.shape
    tau = grad.mul(grad.reshape(sigma, (n, s)), grad.constant(deltas))
    alpha = grad.sub(grad.constant(np.ones((n, s))), grad.exp(grad.neg(tau)))
    trans = grad.exp(grad.neg(grad.exclusive_cumsum(tau, axis=1)))
    weights = grad.mul(trans, alpha)
    cols = []
    for c in range(3):
        plane = grad.reshape(grad.take_column(rgb, c), (n, s))
        cols.append(grad.tsum(grad.mul(weights, plane), axis=1))
    opacity = grad.tsum(weights, axis=1)
    return grad.concat_columns(cols), opacity, weights


@dataclass
class RenderConfig:
    """Knobs shared by offline rendering and the training forward pass."""

    n_samples: int = 32
    near: float = 0.1
    far: float = 3.5
    stratified: bool = False
    seed: int = 0
    background: tuple = (1.0, 1.0, 1.0)
    tau: float = 1e-3


def _ray_depths(cfg, n_rays, t, pixel_ids=None):
    """Per-ray sample depths: midpoints, or per-pixel-seeded stratified."""
    if not cfg.stratified:
        edges = np.linspace(cfg.near, cfg.far, cfg.n_samples + 1)
        mids = 0.5 * (edges[:-1] + edges[1:])
        return np.tile(mids, (n_rays, 1))
    depths = np.empty((n_rays, cfg.n_samples))
    tkey = int(round(float(t) * 4096))
    ids = pixel_ids if pixel_ids is not None else np.arange(n_rays)
    edges = np.linspace(cfg.near, cfg.far, cfg.n_samples + 1)
    widths = np.diff(edges)
    for i, pid in enumerate(ids):
        rng = np.random.default_rng((cfg.seed, int(pid), tkey))
        depths[i] = edges[:-1] + rng.uniform(0.0, 1.0, cfg.n_samples) * widths
    return depths


def render_rays(model, origins, dirs, t, cfg, pixel_ids=None, tau=None,
                want_probs=False, depths=None):
    """Volume-render a batch of rays at one time value.

    Returns (colors Tensor (N, 3), opacity Tensor (N,), aux dict).  tau=None
    uses cfg.tau; training passes tau=0.0 so every branch keeps its gradient
    and supplies its own stratified depths.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    n = origins.shape[0]
    s = cfg.n_samples
    ts = np.asarray(t, dtype=np.float64)
    if depths is None:
        if ts.ndim != 0:
            raise ValueError("per-ray times need caller-provided depths")
        depths = _ray_depths(cfg, n, t, pixel_ids)
    pts = origins[:, None, :] + depths[..., None] * dirs[:, None, :]
    flat_pts = pts.reshape(n * s, 3)
    flat_dirs = np.repeat(dirs, s, axis=0)
    flat_ts = t if ts.ndim == 0 else np.repeat(ts, s)

    use_tau = cfg.tau if tau is None else tau
    v, probs = model.blended_feature(flat_pts, flat_ts, tau=use_tau)
    sigma, rgb = model.decode_radiance(v, flat_dirs)
    # the scene lives in the unit cube: samples outside contribute no
    # density (out-of-bounds grid queries clamp, which would otherwise
    # smear boundary features along every ray)
    inside = ((flat_pts >= 0.0) & (flat_pts <= 1.0)).all(axis=1)
    if not inside.all():
        sigma = grad.mul(sigma, grad.constant(inside.astype(np.float64)))
    deltas = np.tile(bin_deltas(cfg.near, cfg.far, s), (n, 1))
    colors, opacity, weights = composite_graph(sigma, rgb, deltas)

    ones = grad.constant(np.ones(n))
    bg = [grad.scale(grad.sub(ones, opacity), c) for c in cfg.background]
    colors = grad.add(colors, grad.concat_columns(bg))
    aux = {"weights": weights, "depths": depths}
    if want_probs:
        aux["probs"] = probs
    return colors, opacity, aux


def render_ray(model, ray, t, cfg):
    """Color of a single ray as a plain (3,) array."""
    cfg = replace(cfg, near=ray.near, far=ray.far)
    colors, _, _ = render_rays(model, ray.origin[None, :],
                               ray.direction[None, :], t, cfg)
    return colors.data[0]


def lattice_points(width, height):
    """Pixel-center lattice of [0,1]^2 points for the direct-2d mode."""
    ys, xs = np.meshgrid((np.arange(height) + 0.5) / height,
                         (np.arange(width) + 0.5) / width, indexing="ij")
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


def render_image(model, camera, t, cfg, want_opacity=False):
    """Render one frame; (H, W, 3) in [0, 1], plus opacity if requested."""
    if model.config.mode == "direct-2d":
        pts = lattice_points(camera.width, camera.height)
        v, _ = model.blended_feature(pts, t, tau=cfg.tau)
        img = model.direct_color(v).data.reshape(camera.height, camera.width, 3)
        return (img, np.ones(img.shape[:2])) if want_opacity else img
    origins, dirs = pixel_rays(camera)
    colors, opacity, _ = render_rays(
        model, origins, dirs, t, cfg,
        pixel_ids=np.arange(origins.shape[0]))
    img = colors.data.reshape(camera.height, camera.width, 3)
    if want_opacity:
        return img, opacity.data.reshape(camera.height, camera.width)
    return img


def render_decomposition_map(model, camera, t, cfg):
    """Per-pixel decomposition probabilities as a 3-channel image.

    Volumetric mode averages sample probabilities under the compositing
    weights (renormalized so the pixel stays on the simplex); rays that hit
    nothing fall back to the plain mean over their samples.
    """
    if model.config.mode == "direct-2d":
        pts = lattice_points(camera.width, camera.height)
        probs = model.decompose(pts, t).data
        return probs.reshape(camera.height, camera.width, 3)
    origins, dirs = pixel_rays(camera)
    _, opacity, aux = render_rays(model, origins, dirs, t, cfg,
                                  pixel_ids=np.arange(origins.shape[0]),
                                  want_probs=True)
    n, s = aux["weights"].shape
    w = aux["weights"].data
    probs = aux["probs"].data.reshape(n, s, 3)
    wsum = w.sum(axis=1, keepdims=True)
    averaged = np.where(wsum > 1e-12,
                        np.einsum("ns,nsc->nc", w, probs) / np.maximum(wsum, 1e-12),
                        probs.mean(axis=1))
    return averaged.reshape(camera.height, camera.width, 3)


# ---------------------------------------------------------------------------
# image files: 8-bit PNG for viewing, float32 planes for exact comparisons


def write_png(path, img):
    arr = np.clip(np.asarray(img) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def read_png(path):
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def write_raw(path, img):
    np.save(path, np.asarray(img, dtype=np.float32))


def read_raw(path):
    return np.load(path).astype(np.float64)
