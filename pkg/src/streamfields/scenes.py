"""Synthetic ground-truth scenes with analytic oracles, plus PSNR/SSIM.

Two generators:

  * a 2D toy sequence: static textured background, a block-text glyph under
    rigid linear motion, and a second glyph fading in over a frame ramp.
    Every pixel of every frame carries a category mask (static /
    deforming / new) so region metrics have exact ground truth;
  * a small 3D scene traced analytically: axis-aligned boxes, one
    translating sphere and one appearing sphere, observed by a camera ring.

Glyphs are procedural block rasters (a tiny builtin 3x5 font), so the
datasets are hermetic.  Datasets are written as a directory of PNG frames,
palette-coded mask PNGs and a plain-text manifest.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .render import Camera, camera_from_lookat, pixel_rays, write_png, read_png

__all__ = [
    "CATEGORY_STATIC",
    "CATEGORY_DEFORM",
    "CATEGORY_NEW",
    "Glyph",
    "ToySpec",
    "ToyDataset",
    "Scene3dSpec",
    "Scene3dDataset",
    "block_text",
    "default_toy_spec",
    "default_scene3d_spec",
    "gen_toy2d",
    "gen_scene3d",
    "fade_ramp",
    "psnr",
    "ssim",
    "region_ssim",
    "save_toy_dataset",
    "load_toy_dataset",
    "save_scene3d_dataset",
    "load_scene3d_dataset",
]

CATEGORY_STATIC = 0
CATEGORY_DEFORM = 1
CATEGORY_NEW = 2

_FONT = {
    "0": ("111", "101", "101", "101", "111"),
    "2": ("111", "001", "111", "100", "111"),
    "V": ("101", "101", "101", "101", "010"),
    "R": ("110", "101", "110", "101", "101"),
    "X": ("101", "101", "010", "101", "101"),
}


@dataclass
class Glyph:
    """A colored raster with an alpha mask."""

    color: np.ndarray  # (h, w, 3)
    alpha: np.ndarray  # (h, w) in [0, 1]

    @property
    def shape(self):
        return self.alpha.shape


def block_text(text, scale=3, color=(0.1, 0.1, 0.6)):
    """Rasterize text in the builtin 3x5 block font."""
    cells = []
    for ch in text:
        if ch not in _FONT:
            raise ValueError(f"no block glyph for character {ch!r}")
        bitmap = np.array([[int(c) for c in row] for row in _FONT[ch]])
        cells.append(bitmap)
        cells.append(np.zeros((5, 1), dtype=int))  # 1-cell gap
    bitmap = np.concatenate(cells[:-1], axis=1)
    alpha = np.kron(bitmap, np.ones((scale, scale))).astype(np.float64)
    col = np.broadcast_to(np.asarray(color, dtype=np.float64),
                          (*alpha.shape, 3)).copy()
    return Glyph(color=col, alpha=alpha)


def fade_ramp(t, start, end):
    """Opacity ramp: 0 before start, 1 after end, linear between."""
    if t <= start:
        return 0.0
    if t >= end:
        return 1.0
    return (t - start) / float(end - start)


@dataclass
class ToySpec:
    """2D toy sequence: moving glyph + fading glyph over a static background."""

    width: int
    height: int
    T: int
    background: np.ndarray          # (height, width, 3)
    moving: Glyph
    moving_start: tuple             # (x, y) top-left at frame 0
    moving_velocity: tuple          # pixels per frame
    appearing: Glyph
    appearing_pos: tuple
    fade_start: int
    fade_end: int
    holdout: tuple = ()

    def moving_pos(self, t):
        # rounded per frame so the raster stays pixel-aligned
        return (int(round(self.moving_start[0] + self.moving_velocity[0] * t)),
                int(round(self.moving_start[1] + self.moving_velocity[1] * t)))

    def validate(self):
        problems = []
        if self.background.shape != (self.height, self.width, 3):
            problems.append(
                f"background shape {self.background.shape} != "
                f"({self.height}, {self.width}, 3)")
        for t in range(self.T):
            x, y = self.moving_pos(t)
            gh, gw = self.moving.shape
            if not (0 <= x and x + gw <= self.width
                    and 0 <= y and y + gh <= self.height):
                problems.append(f"moving glyph leaves the frame at t={t}")
                break
        ah, aw = self.appearing.shape
        ax, ay = self.appearing_pos
        if not (0 <= ax and ax + aw <= self.width
                and 0 <= ay and ay + ah <= self.height):
            problems.append("appearing glyph outside the frame")
        if not (0 <= self.fade_start <= self.fade_end <= self.T - 1):
            problems.append(
                f"fade ramp [{self.fade_start}, {self.fade_end}] outside "
                f"[0, {self.T - 1}]")
        if any(not 0 <= t < self.T for t in self.holdout):
            problems.append(f"holdout frames {self.holdout} outside range")
        if problems:
            raise ValueError("invalid toy spec: " + "; ".join(problems))


@dataclass
class ToyDataset:
    frames: np.ndarray        # (T, H, W, 3) in [0, 1]
    masks: np.ndarray         # (T, H, W) uint8 categories
    train_frames: tuple
    holdout_frames: tuple
    spec: ToySpec = None

    @property
    def T(self):
        return self.frames.shape[0]

    @property
    def size(self):
        return self.frames.shape[2], self.frames.shape[1]


def _smooth_background(width, height, rng, knots=6):
    coarse = rng.uniform(0.25, 0.9, size=(knots, knots, 3))
    img = np.array(Image.fromarray(
        (coarse * 255).astype(np.uint8)).resize((width, height),
                                                Image.BILINEAR))
    return img.astype(np.float64) / 255.0


def default_toy_spec(width=96, height=96, T=30, seed=0):
    """The stock interpolation experiment: '2022' slides, 'VR' fades in."""
    rng = np.random.default_rng(seed)
    bg = _smooth_background(width, height, rng)
    # crisp rectangles spread over the canvas so the static area has edges
    # (including under the appearing glyph's band)
    if height > 24 and width > 16:
        for i in range(6):
            x0 = rng.integers(0, width - 16)
            y0 = rng.integers(0, height - 10)
            bg[y0:y0 + 6, x0:x0 + 12] = rng.uniform(0.1, 0.9, size=3)
    # per-frame steps stay within a stroke width so the warp can find the
    # alignment; the diagonal component enlarges the displacement across a
    # held-out frame, which is what a warpless model cannot bridge
    moving = block_text("22", scale=max(1, round(width / 32)),
                        color=(0.08, 0.15, 0.62))
    app_scale = max(1, round(width / 24))
    appearing = block_text("VR", scale=app_scale, color=(0.75, 0.1, 0.12))
    # saturated random per-cell colors: the fading content is structurally
    # new, not a tinted copy of anything already in the scene
    ah, aw = appearing.alpha.shape
    for cy in range(0, ah, app_scale):
        for cx in range(0, aw, app_scale):
            appearing.color[cy:cy + app_scale, cx:cx + app_scale] = \
                np.where(rng.uniform(size=3) > 0.5, 0.95, 0.05)
    # glyph bands start vertically disjoint and the downward drift keeps
    # them apart; velocities fit the trajectory inside the frame (0 for
    # very long clips)
    margin = 2
    y0 = round(0.40 * height)
    vx = min(1, (width - moving.shape[1] - 2 * margin) // max(1, T - 1))
    vy = min(1, (height - y0 - moving.shape[0] - margin) // max(1, T - 1))
    # a short fade mid-sequence: appearance is temporally high-frequency,
    # the regime newness channels handle and a low-frequency warp cannot
    fade_start = max(1, T // 2 - 2)
    fade_end = max(fade_start, min(T - 2, T // 2 + 2))
    return ToySpec(
        width=width, height=height, T=T, background=bg,
        moving=moving, moving_start=(margin, y0),
        moving_velocity=(vx, vy),
        appearing=appearing,
        appearing_pos=(round(0.3 * width), max(2, height // 16)),
        fade_start=fade_start, fade_end=fade_end,
        holdout=tuple(t for t in range(T) if t % 3 == 1),
    )


def _alpha_over(img, glyph, pos, opacity=1.0):
    x, y = pos
    gh, gw = glyph.shape
    a = (glyph.alpha * opacity)[..., None]
    img[y:y + gh, x:x + gw] = (1.0 - a) * img[y:y + gh, x:x + gw] \
        + a * glyph.color


def gen_toy2d(spec, rng=None):
    """Render the toy sequence plus exact per-pixel category masks.

    Categories follow temporal behavior, not drawing order: the moving
    glyph counts as deforming only if it actually changes position, and
    the appearing glyph's footprint counts as new only if its opacity
    changes within the sequence.
    """
    spec.validate()
    frames = np.empty((spec.T, spec.height, spec.width, 3))
    masks = np.empty((spec.T, spec.height, spec.width), dtype=np.uint8)
    ramps = [fade_ramp(t, spec.fade_start, spec.fade_end)
             for t in range(spec.T)]
    appears = ramps[0] != ramps[-1]
    moves = any(spec.moving_pos(t) != spec.moving_pos(0)
                for t in range(spec.T))
    ax, ay = spec.appearing_pos
    ah, aw = spec.appearing.shape
    new_region = np.zeros((spec.height, spec.width), dtype=bool)
    if appears:
        new_region[ay:ay + ah, ax:ax + aw] = spec.appearing.alpha > 0
    for t in range(spec.T):
        img = spec.background.copy()
        _alpha_over(img, spec.appearing, spec.appearing_pos, ramps[t])
        _alpha_over(img, spec.moving, spec.moving_pos(t))
        frames[t] = img

        mask = np.full((spec.height, spec.width), CATEGORY_STATIC,
                       dtype=np.uint8)
        mask[new_region] = CATEGORY_NEW
        if moves:
            x, y = spec.moving_pos(t)
            gh, gw = spec.moving.shape
            sub = mask[y:y + gh, x:x + gw]
            sub[spec.moving.alpha > 0] = CATEGORY_DEFORM
        masks[t] = mask
    train = tuple(t for t in range(spec.T) if t not in set(spec.holdout))
    return ToyDataset(frames=frames, masks=masks, train_frames=train,
                      holdout_frames=tuple(sorted(spec.holdout)), spec=spec)


# ---------------------------------------------------------------------------
# 3D desk scene


@dataclass
class Scene3dSpec:
    """Boxes + one translating and one appearing sphere in the unit cube."""

    boxes: list                    # (lo, hi, albedo) triples
    moving_center0: tuple
    moving_center1: tuple          # linear path over the sequence
    moving_radius: float
    moving_albedo: tuple
    appearing_center: tuple
    appearing_radius: float
    appearing_albedo: tuple
    fade_start: int
    fade_end: int
    n_cameras: int = 8
    cam_radius: float = 1.9
    cam_height: float = 1.1
    look_at: tuple = (0.5, 0.5, 0.5)
    fov_deg: float = 42.0
    T: int = 30
    width: int = 64
    height: int = 64
    near: float = 0.6
    far: float = 3.6
    background: tuple = (1.0, 1.0, 1.0)
    holdout_cameras: tuple = (0,)

    def cameras(self):
        cams = []
        cx, cy, cz = self.look_at
        for i in range(self.n_cameras):
            ang = 2.0 * np.pi * i / self.n_cameras
            pos = (cx + self.cam_radius * np.cos(ang),
                   self.cam_height,
                   cz + self.cam_radius * np.sin(ang))
            cams.append(camera_from_lookat(pos, self.look_at, (0, 1, 0),
                                           self.fov_deg, self.width,
                                           self.height))
        return cams

    def moving_center(self, t):
        a = t / (self.T - 1) if self.T > 1 else 0.0
        c0 = np.asarray(self.moving_center0, dtype=np.float64)
        c1 = np.asarray(self.moving_center1, dtype=np.float64)
        return (1.0 - a) * c0 + a * c1

    def validate(self):
        problems = []
        for lo, hi, _ in self.boxes:
            lo, hi = np.asarray(lo), np.asarray(hi)
            if (lo < 0).any() or (hi > 1).any() or (lo >= hi).any():
                problems.append(f"box [{lo}, {hi}] not inside the unit cube")
        for t in (0, self.T - 1):
            c = self.moving_center(t)
            if ((c - self.moving_radius) < 0).any() \
                    or ((c + self.moving_radius) > 1).any():
                problems.append(f"moving sphere leaves the unit cube at t={t}")
        if not (0 <= self.fade_start <= self.fade_end <= self.T - 1):
            problems.append("fade ramp outside the sequence")
        if any(not 0 <= c < self.n_cameras for c in self.holdout_cameras):
            problems.append("holdout camera index out of range")
        if problems:
            raise ValueError("invalid 3d scene spec: " + "; ".join(problems))


@dataclass
class Scene3dDataset:
    images: np.ndarray          # (n_cams, T, H, W, 3)
    cameras: list
    train_cameras: tuple
    holdout_cameras: tuple
    spec: Scene3dSpec = None

    @property
    def T(self):
        return self.images.shape[1]


def default_scene3d_spec(T=30, size=64, seed=0):
    rng = np.random.default_rng(seed)
    boxes = [
        # floor slab and a back wall block
        ((0.05, 0.02, 0.05), (0.95, 0.12, 0.95), tuple(rng.uniform(0.3, 0.7, 3))),
        ((0.12, 0.12, 0.60), (0.42, 0.55, 0.88), tuple(rng.uniform(0.2, 0.9, 3))),
        ((0.62, 0.12, 0.15), (0.88, 0.38, 0.40), tuple(rng.uniform(0.2, 0.9, 3))),
    ]
    return Scene3dSpec(
        boxes=boxes,
        moving_center0=(0.24, 0.30, 0.26), moving_center1=(0.72, 0.30, 0.70),
        moving_radius=0.11, moving_albedo=(0.82, 0.25, 0.18),
        appearing_center=(0.58, 0.62, 0.52), appearing_radius=0.13,
        appearing_albedo=(0.15, 0.35, 0.8),
        fade_start=max(1, T // 3), fade_end=min(T - 2, 2 * T // 3),
        T=T, width=size, height=size,
    )


def _ray_box(origins, dirs, lo, hi):
    """Slab intersection; returns hit depth per ray (inf when missed)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = (lo[None, :] - origins) / dirs
        t1 = (hi[None, :] - origins) / dirs
    tmin = np.minimum(t0, t1).max(axis=1)
    tmax = np.maximum(t0, t1).min(axis=1)
    hit = (tmax >= tmin) & (tmax > 0)
    depth = np.where(tmin > 0, tmin, tmax)  # inside the box: exit point
    return np.where(hit, depth, np.inf)


def _ray_sphere(origins, dirs, center, radius):
    oc = origins - center[None, :]
    b = np.einsum("nd,nd->n", oc, dirs)
    c = np.einsum("nd,nd->n", oc, oc) - radius * radius
    disc = b * b - c
    root = np.sqrt(np.maximum(disc, 0.0))
    t_near = -b - root
    t_far = -b + root
    depth = np.where(t_near > 0, t_near, t_far)
    return np.where((disc >= 0) & (depth > 0), depth, np.inf)


def _trace(spec, camera, t):
    origins, dirs = pixel_rays(camera)
    n = origins.shape[0]
    depth = np.full(n, np.inf)
    color = np.tile(np.asarray(spec.background, dtype=np.float64), (n, 1))
    for lo, hi, albedo in spec.boxes:
        d = _ray_box(origins, dirs, np.asarray(lo, float), np.asarray(hi, float))
        closer = d < depth
        depth = np.where(closer, d, depth)
        color[closer] = albedo
    d = _ray_sphere(origins, dirs, spec.moving_center(t), spec.moving_radius)
    closer = d < depth
    depth = np.where(closer, d, depth)
    color[closer] = spec.moving_albedo
    # the appearing sphere alpha-blends over whatever lies behind it
    ramp = fade_ramp(t, spec.fade_start, spec.fade_end)
    if ramp > 0.0:
        d = np.asarray(_ray_sphere(origins, dirs,
                                   np.asarray(spec.appearing_center, float),
                                   spec.appearing_radius))
        front = d < depth
        color[front] = (1.0 - ramp) * color[front] \
            + ramp * np.asarray(spec.appearing_albedo)
    return color.reshape(camera.height, camera.width, 3)


def gen_scene3d(spec, rng=None):
    """Trace every (camera, frame) pair analytically."""
    spec.validate()
    cams = spec.cameras()
    images = np.empty((len(cams), spec.T, spec.height, spec.width, 3))
    for ci, cam in enumerate(cams):
        for t in range(spec.T):
            images[ci, t] = _trace(spec, cam, t)
    train = tuple(i for i in range(len(cams))
                  if i not in set(spec.holdout_cameras))
    return Scene3dDataset(images=images, cameras=cams, train_cameras=train,
                          holdout_cameras=tuple(sorted(spec.holdout_cameras)),
                          spec=spec)


# ---------------------------------------------------------------------------
# metrics


def psnr(a, b, mask=None):
    """-10 log10(MSE) on [0,1] images, capped at 99 dB for near-zero MSE."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shapes differ, {a.shape} vs {b.shape}")
    if mask is not None:
        if mask.shape != a.shape[:2]:
            raise ValueError(f"psnr: mask shape {mask.shape} does not match")
        if not mask.any():
            raise ValueError("psnr: empty region mask")
        mse = ((a - b) ** 2)[mask].mean()
    else:
        mse = ((a - b) ** 2).mean()
    if mse < 1e-10:
        return 99.0
    return -10.0 * np.log10(mse)


def _gaussian_kernel(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _filter_valid(img, k):
    """Separable 'valid' convolution with a symmetric 1D kernel."""
    n = k.size
    out = np.zeros((img.shape[0] - n + 1, img.shape[1]))
    for i, kv in enumerate(k):
        out += kv * img[i:i + out.shape[0], :]
    out2 = np.zeros((out.shape[0], img.shape[1] - n + 1))
    for i, kv in enumerate(k):
        out2 += kv * out[:, i:i + out2.shape[1]]
    return out2


def ssim(a, b, return_map=False):
    """Single-scale SSIM on the channel-mean grayscale, dynamic range 1.

    11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03, mean over valid
    window positions.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shapes differ, {a.shape} vs {b.shape}")
    x = a.mean(axis=2) if a.ndim == 3 else a
    y = b.mean(axis=2) if b.ndim == 3 else b
    if min(x.shape) < 11:
        raise ValueError(f"ssim: image {x.shape} smaller than the 11x11 window")
    k = _gaussian_kernel()
    mu_x = _filter_valid(x, k)
    mu_y = _filter_valid(y, k)
    xx = _filter_valid(x * x, k) - mu_x * mu_x
    yy = _filter_valid(y * y, k) - mu_y * mu_y
    xy = _filter_valid(x * y, k) - mu_x * mu_y
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    smap = ((2 * mu_x * mu_y + c1) * (2 * xy + c2)) \
        / ((mu_x ** 2 + mu_y ** 2 + c1) * (xx + yy + c2))
    return (smap.mean(), smap) if return_map else smap.mean()


def region_ssim(a, b, mask):
    """Mean SSIM over windows whose center pixel lies in the mask."""
    _, smap = ssim(a, b, return_map=True)
    centers = mask[5:5 + smap.shape[0], 5:5 + smap.shape[1]]
    if not centers.any():
        raise ValueError("region_ssim: no window centers inside the mask")
    return smap[centers].mean()


# ---------------------------------------------------------------------------
# dataset directories: manifest + frame PNGs + palette mask PNGs

_MASK_PALETTE = [0, 0, 0, 0, 255, 0, 255, 0, 0]  # static, deforming, new


def _write_mask_png(path, mask):
    img = Image.fromarray(mask.astype(np.uint8), mode="P")
    img.putpalette(_MASK_PALETTE + [0] * (768 - len(_MASK_PALETTE)))
    img.save(path, format="PNG")


def _read_mask_png(path):
    return np.asarray(Image.open(path), dtype=np.uint8)


def _write_manifest(path, entries):
    with open(path, "w") as fh:
        for key, value in entries:
            fh.write(f"{key} = {value}\n")


def _read_manifest(path):
    entries = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            entries.setdefault(key.strip(), []).append(value.strip())
    return entries


def save_toy_dataset(ds, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    for t in range(ds.T):
        write_png(os.path.join(out_dir, f"frame_{t:04d}.png"), ds.frames[t])
        _write_mask_png(os.path.join(out_dir, f"mask_{t:04d}.png"),
                        ds.masks[t])
    _write_manifest(os.path.join(out_dir, "manifest.txt"), [
        ("kind", "toy2d"),
        ("width", ds.frames.shape[2]),
        ("height", ds.frames.shape[1]),
        ("frames", ds.T),
        ("holdout", ",".join(str(t) for t in ds.holdout_frames)),
    ])


def load_toy_dataset(in_dir):
    man = _read_manifest(os.path.join(in_dir, "manifest.txt"))
    if man["kind"][0] != "toy2d":
        raise ValueError(f"not a toy2d dataset: {man['kind']}")
    T = int(man["frames"][0])
    frames = np.stack([read_png(os.path.join(in_dir, f"frame_{t:04d}.png"))
                       for t in range(T)])
    masks = np.stack([_read_mask_png(os.path.join(in_dir, f"mask_{t:04d}.png"))
                      for t in range(T)])
    holdout = tuple(int(v) for v in man["holdout"][0].split(",") if v != "")
    train = tuple(t for t in range(T) if t not in set(holdout))
    return ToyDataset(frames=frames, masks=masks, train_frames=train,
                      holdout_frames=holdout)


def save_scene3d_dataset(ds, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    cam_lines = []
    for ci, cam in enumerate(ds.cameras):
        for t in range(ds.T):
            write_png(os.path.join(out_dir, f"cam{ci:02d}_frame{t:04d}.png"),
                      ds.images[ci, t])
        pose = " ".join(f"{v:.17g}" for v in cam.pose.ravel())
        cam_lines.append((f"camera{ci}",
                          f"{pose} {cam.fx:.17g} {cam.fy:.17g} "
                          f"{cam.cx:.17g} {cam.cy:.17g}"))
    _write_manifest(os.path.join(out_dir, "manifest.txt"), [
        ("kind", "scene3d"),
        ("width", ds.images.shape[3]),
        ("height", ds.images.shape[2]),
        ("frames", ds.T),
        ("cameras", len(ds.cameras)),
        ("holdout_cameras", ",".join(str(c) for c in ds.holdout_cameras)),
        *cam_lines,
    ])


def load_scene3d_dataset(in_dir):
    man = _read_manifest(os.path.join(in_dir, "manifest.txt"))
    if man["kind"][0] != "scene3d":
        raise ValueError(f"not a scene3d dataset: {man['kind']}")
    T = int(man["frames"][0])
    n_cams = int(man["cameras"][0])
    width = int(man["width"][0])
    height = int(man["height"][0])
    cameras = []
    for ci in range(n_cams):
        vals = [float(v) for v in man[f"camera{ci}"][0].split()]
        pose = np.array(vals[:12]).reshape(3, 4)
        cameras.append(Camera(pose=pose, fx=vals[12], fy=vals[13],
                              cx=vals[14], cy=vals[15],
                              width=width, height=height))
    images = np.stack([
        np.stack([read_png(os.path.join(in_dir, f"cam{ci:02d}_frame{t:04d}.png"))
                  for t in range(T)])
        for ci in range(n_cams)])
    holdout = tuple(int(v) for v in man["holdout_cameras"][0].split(",")
                    if v != "")
    train = tuple(c for c in range(n_cams) if c not in set(holdout))
    return Scene3dDataset(images=images, cameras=cameras,
                          train_cameras=train, holdout_cameras=holdout)
