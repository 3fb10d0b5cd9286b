"""Losses, optimizer and the clip-wise fitting loop.

The total loss is reconstruction + lambda * parsimony, where reconstruction
is the batch mean of the squared L2 color error and parsimony is
alpha * mean(P_deform) + mean(P_new) over every sampled point.  alpha anneals
geometrically from a large value (deformation strongly discouraged early)
down to its resting value over the first part of training.

The skip threshold tau is never applied while training: a skipped branch
would receive no gradient and could never grow its probability.
"""

from __future__ import annotations

from dataclasses import dataclass, fields as dc_fields

import numpy as np

from . import grad
from .fields import ModelConfig, SceneModel
from .render import RenderConfig, pixel_rays, render_rays
from .scenes import Scene3dDataset, ToyDataset

__all__ = [
    "TrainConfig",
    "Adam",
    "TrainingDiverged",
    "reconstruction_loss",
    "parsimony_loss",
    "total_loss",
    "alpha_at",
    "sample_batch",
    "train_step",
    "fit",
    "FitResult",
    "save_loss_csv",
    "load_config",
    "save_config",
]


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    """Everything a reproducible fit needs, flat for the key=value file."""

    # optimization
    batch_size: int = 1024
    steps: int = 4000
    lr: float = 5e-3
    lr_final: float = 5e-4
    lambda_reg: float = 0.1
    alpha_start: float = 1.0
    alpha_end: float = 0.01
    alpha_decay_steps: int = 0  # 0: auto, 30% of steps
    tau: float = 1e-3           # rendering-time skip threshold only
    seed: int = 0
    samples_per_ray: int = 24
    clip_length: int = 90
    stratified: bool = True
    ablate: str = "none"
    # model
    grid_size: int = 64
    F: int = 4
    k: str = "1"
    backbone: str = "dense"
    rank: int = 8
    pos_levels: int = 6
    def_time_levels: int = 2
    stat_time_levels: int = 1
    dir_levels: int = 4
    # decoder widths, comma-separated hidden layer sizes
    decomp_hidden: str = "32"
    stat_hidden: str = "64"
    deform_hidden: str = "64,64,64"
    radiance_hidden: str = "64,64,64"
    color_hidden: str = "64,64"
    # volumetric rendering bounds and background
    near: float = 0.6
    far: float = 3.6
    background: float = 1.0  # constant gray level behind the scene

    def __post_init__(self):
        if self.lambda_reg < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lambda_reg}")
        if not self.alpha_start >= self.alpha_end >= 0:
            raise ValueError(
                f"need alpha_start >= alpha_end >= 0, got "
                f"{self.alpha_start} -> {self.alpha_end}")
        if self.clip_length < 1:
            raise ValueError(f"clip length must be >= 1, got {self.clip_length}")
        if self.ablate not in ("none", "no-static", "no-deform", "no-new"):
            raise ValueError(f"unknown ablation {self.ablate!r}")

    @property
    def resolved_alpha_decay_steps(self):
        if self.alpha_decay_steps > 0:
            return self.alpha_decay_steps
        return max(1, int(0.3 * self.steps))

    def lr_at(self, step):
        frac = step / max(1, self.steps)
        return self.lr * (self.lr_final / self.lr) ** frac

    def model_config(self, mode, T, stat_time_levels=None):
        d = 2 if mode == "direct-2d" else 3

        def widths(spec):
            return tuple(int(w) for w in str(spec).split(",") if w != "")

        return ModelConfig(
            mode=mode, dims=(self.grid_size,) * d, F=self.F, k=self.k, T=T,
            backbone=self.backbone, rank=self.rank, tau=self.tau,
            pos_levels=self.pos_levels,
            def_time_levels=self.def_time_levels,
            stat_time_levels=(self.stat_time_levels
                              if stat_time_levels is None else stat_time_levels),
            dir_levels=self.dir_levels, seed=self.seed,
            decomp_hidden=widths(self.decomp_hidden),
            stat_hidden=widths(self.stat_hidden),
            deform_hidden=widths(self.deform_hidden),
            radiance_hidden=widths(self.radiance_hidden),
            color_hidden=widths(self.color_hidden),
            near=self.near, far=self.far, background=self.background)

    def render_config(self):
        return RenderConfig(n_samples=self.samples_per_ray, near=self.near,
                            far=self.far, stratified=False, seed=self.seed,
                            background=(self.background,) * 3, tau=self.tau)


# ---------------------------------------------------------------------------
# losses


def reconstruction_loss(pred, gt):
    """Mean over the batch of the squared L2 color error."""
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(
            f"reconstruction_loss: {pred.shape} predictions vs {gt.shape} "
            f"ground truth")
    diff = grad.sub(pred, grad.constant(gt))
    return grad.scale(grad.tsum(grad.mul(diff, diff)), 1.0 / gt.shape[0])


def parsimony_loss(probs, alpha):
    """alpha * mean(P_deform) + mean(P_new) over all sampled points."""
    if not isinstance(probs, grad.Tensor):
        probs = grad.constant(np.asarray(probs, dtype=np.float64))
    if probs.data.ndim != 2 or probs.shape[1] != 3 or probs.shape[0] == 0:
        raise ValueError(f"parsimony_loss: need a nonempty (N, 3) batch, "
                         f"got {probs.shape}")
    sums = probs.data.sum(axis=1)
    if np.abs(sums - 1.0).max() > 1e-9 or (probs.data < -1e-12).any():
        raise ValueError("parsimony_loss: probabilities are off the simplex")
    return grad.add(grad.scale(grad.tmean(grad.take_column(probs, 1)), alpha),
                    grad.tmean(grad.take_column(probs, 2)))


def total_loss(rec, reg, lam):
    return grad.add(rec, grad.scale(reg, lam))


def alpha_at(config, step):
    """Annealed deformation penalty: geometric start->end, then constant."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    d = config.resolved_alpha_decay_steps
    u = min(step / d, 1.0)
    if config.alpha_end == 0.0 or config.alpha_start == 0.0:
        return config.alpha_start + u * (config.alpha_end - config.alpha_start)
    return float(config.alpha_start
                 * (config.alpha_end / config.alpha_start) ** u)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with bias correction; beta1=0.9, beta2=0.999, eps=1e-8."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {id(p): np.zeros(p.shape) for p in self.params}
        self.v = {id(p): np.zeros(p.shape) for p in self.params}

    def step(self, grads, lr):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for p in self.params:
            g = grads.get(p)
            if g is None:
                continue
            m = self.m[id(p)]
            v = self.v[id(p)]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


# ---------------------------------------------------------------------------
# batches


@dataclass
class PixelBatch:
    points: np.ndarray   # (N, 2) in [0,1]^2
    times: np.ndarray    # (N,) frame times
    gt: np.ndarray       # (N, 3)


@dataclass
class RayBatch:
    origins: np.ndarray
    dirs: np.ndarray
    times: np.ndarray
    gt: np.ndarray


def sample_batch(dataset, rng, n):
    """Uniform draw over (training image, pixel); deterministic per rng."""
    if isinstance(dataset, ToyDataset):
        frames = np.asarray(dataset.train_frames)
        if frames.size == 0:
            raise ValueError("dataset has no training frames")
        h, w = dataset.frames.shape[1:3]
        flat = rng.integers(0, frames.size * h * w, size=n)
        fi, rest = np.divmod(flat, h * w)
        ys, xs = np.divmod(rest, w)
        ts = frames[fi]
        pts = np.stack([(xs + 0.5) / w, (ys + 0.5) / h], axis=1)
        return PixelBatch(points=pts, times=ts.astype(np.float64),
                          gt=dataset.frames[ts, ys, xs])
    if isinstance(dataset, Scene3dDataset):
        cams = np.asarray(dataset.train_cameras)
        n_cams, T, h, w = dataset.images.shape[:4]
        flat = rng.integers(0, cams.size * T * h * w, size=n)
        ci, rest = np.divmod(flat, T * h * w)
        t, rest = np.divmod(rest, h * w)
        ys, xs = np.divmod(rest, w)
        ci = cams[ci]
        origins = np.empty((n, 3))
        dirs = np.empty((n, 3))
        for c in np.unique(ci):
            sel = ci == c
            o, d = pixel_rays(dataset.cameras[c],
                              np.stack([xs[sel], ys[sel]], axis=1))
            origins[sel] = o
            dirs[sel] = d
        return RayBatch(origins=origins, dirs=dirs,
                        times=t.astype(np.float64),
                        gt=dataset.images[ci, t, ys, xs])
    raise TypeError(f"unknown dataset type {type(dataset).__name__}")


# ---------------------------------------------------------------------------
# steps and the fit loop


def _forward_batch(model, batch, config, rng):
    """Predicted colors plus per-point probabilities for one batch."""
    if isinstance(batch, PixelBatch):
        v, probs = model.blended_feature(batch.points, batch.times, tau=0.0)
        return model.direct_color(v), probs
    rcfg = config.render_config()
    s = config.samples_per_ray
    n = batch.times.size
    if config.stratified:
        edges = np.linspace(config.near, config.far, s + 1)
        depths = edges[:-1] + rng.uniform(0, 1, (n, s)) * np.diff(edges)
    else:
        mids = 0.5 * (np.linspace(config.near, config.far, s + 1)[:-1]
                      + np.linspace(config.near, config.far, s + 1)[1:])
        depths = np.tile(mids, (n, 1))
    colors, _, aux = render_rays(model, batch.origins, batch.dirs,
                                 batch.times, rcfg, tau=0.0,
                                 want_probs=True, depths=depths)
    return colors, aux["probs"]


@dataclass
class LossParts:
    step: int
    rec: float
    reg: float
    total: float
    alpha: float


def train_step(model, batch, optimizer, config, step, rng):
    """One forward/backward/Adam update; returns the loss breakdown."""
    pred, probs = _forward_batch(model, batch, config, rng)
    alpha = alpha_at(config, step)
    rec = reconstruction_loss(pred, batch.gt)
    reg = parsimony_loss(probs, alpha)
    loss = total_loss(rec, reg, config.lambda_reg)

    if not np.isfinite(loss.data):
        raise TrainingDiverged(
            f"non-finite loss at step {step}: rec={rec.data}, reg={reg.data}")
    grads = grad.backward(loss, params=model.parameters())
    worst = max((np.abs(g).max() for g in grads.values()), default=0.0)
    if not np.isfinite(worst):
        raise TrainingDiverged(
            f"non-finite gradient at step {step}: rec={float(rec.data)}, "
            f"reg={float(reg.data)}, max|grad|={worst}")
    optimizer.step(grads, config.lr_at(step))
    return LossParts(step=step, rec=float(rec.data), reg=float(reg.data),
                     total=float(loss.data), alpha=alpha)


def _clip_dataset(dataset, t0, t1):
    if isinstance(dataset, ToyDataset):
        hold = tuple(t - t0 for t in dataset.holdout_frames if t0 <= t < t1)
        train = tuple(t - t0 for t in dataset.train_frames if t0 <= t < t1)
        return ToyDataset(frames=dataset.frames[t0:t1],
                          masks=dataset.masks[t0:t1],
                          train_frames=train, holdout_frames=hold,
                          spec=dataset.spec)
    return Scene3dDataset(images=dataset.images[:, t0:t1],
                          cameras=dataset.cameras,
                          train_cameras=dataset.train_cameras,
                          holdout_cameras=dataset.holdout_cameras,
                          spec=dataset.spec)


@dataclass
class FitResult:
    models: list
    clip_ranges: list   # (t0, t1) per model
    curves: list        # list of LossParts lists, one per clip

    def model_for_frame(self, t):
        for m, (t0, t1) in zip(self.models, self.clip_ranges):
            if t0 <= t < t1:
                return m, t - t0
        raise ValueError(f"frame {t} outside every clip")


def fit(dataset, config, log_every=0, stat_time_levels=None):
    """Split into clips, fit one model per clip; deterministic per seed.

    On divergence the raised TrainingDiverged carries the clips finished so
    far in its ``partial`` attribute so callers can save them.
    """
    mode = "direct-2d" if isinstance(dataset, ToyDataset) else "volumetric-3d"
    T = dataset.T
    clips = [(t0, min(t0 + config.clip_length, T))
             for t0 in range(0, T, config.clip_length)]
    models, curves = [], []
    try:
        for ci, (t0, t1) in enumerate(clips):
            sub = _clip_dataset(dataset, t0, t1)
            mcfg = config.model_config(mode, t1 - t0,
                                       stat_time_levels=stat_time_levels)
            mcfg.seed = config.seed + ci
            model = SceneModel(mcfg, rng=np.random.default_rng(mcfg.seed))
            model.ablate = config.ablate
            optimizer = Adam(model.parameters())
            rng = np.random.default_rng((config.seed, ci))
            curve = []
            for step in range(config.steps):
                batch = sample_batch(sub, rng, config.batch_size)
                parts = train_step(model, batch, optimizer, config, step, rng)
                if log_every and (step % log_every == 0
                                  or step == config.steps - 1):
                    curve.append(parts)
                elif not log_every and step == config.steps - 1:
                    curve.append(parts)
            models.append(model)
            curves.append(curve)
    except TrainingDiverged as exc:
        exc.partial = FitResult(models=models,
                                clip_ranges=clips[:len(models)],
                                curves=curves)
        raise
    return FitResult(models=models, clip_ranges=clips, curves=curves)


def toy2d_preset(**overrides):
    """Training preset for the 2D glyph interpolation experiment.

    The stationary decoder's time input is disabled: the toy has no global
    appearance drift, and a time-capable static branch would absorb the
    fade-in the experiment is about.
    """
    base = dict(steps=4000, batch_size=1024, grid_size=64,
                stat_time_levels=0, seed=0)
    base.update(overrides)
    return TrainConfig(**base)


def scene3d_preset(**overrides):
    """Training preset for the desk-scale multi-camera 3D scene.

    Depth bounds hug the unit cube as seen from the camera ring so the
    sample budget is spent inside the scene.
    """
    base = dict(steps=1500, batch_size=384, grid_size=32,
                samples_per_ray=20, stat_time_levels=0, seed=0,
                near=0.8, far=3.0, background=1.0)
    base.update(overrides)
    return TrainConfig(**base)


CKPT_MAGIC = b"SFCK"


def save_checkpoint(path, model):
    """Full-precision checkpoint: JSON header + raw float64 blobs.

    Deterministic byte-for-byte (unlike zip containers), so identical fits
    produce identical files.
    """
    import json

    records = []
    blobs = []
    offset = 0
    for p in model.parameters():
        blob = p.data.astype("<f8").tobytes()
        records.append([p.name, list(p.shape), offset])
        blobs.append(blob)
        offset += len(blob)
    head = json.dumps({"config": model.config.to_dict(),
                       "ablate": model.ablate, "params": records},
                      sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + len(head).to_bytes(8, "little") + head)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    import json

    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CKPT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        hlen = int.from_bytes(fh.read(8), "little")
        head = json.loads(fh.read(hlen).decode())
        body = fh.read()
    config = ModelConfig.from_dict(head["config"])
    model = SceneModel(config, rng=np.random.default_rng(config.seed))
    model.ablate = head["ablate"]
    by_name = {p.name: p for p in model.parameters()}
    for name, shape, offset in head["params"]:
        p = by_name.pop(name)
        vals = np.frombuffer(body, dtype="<f8", count=p.data.size,
                             offset=offset)
        p.data[:] = vals.reshape(p.shape)
    if by_name:
        raise ValueError(f"checkpoint is missing parameters {sorted(by_name)}")
    return model


def save_fit(out_dir, result, config):
    """Write per-clip checkpoints, the loss CSV and the resolved config."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    for ci, model in enumerate(result.models):
        save_checkpoint(os.path.join(out_dir, f"clip{ci:02d}.ckpt"), model)
    with open(os.path.join(out_dir, "clips.txt"), "w") as fh:
        for t0, t1 in result.clip_ranges:
            fh.write(f"{t0} {t1}\n")
    save_loss_csv(os.path.join(out_dir, "loss.csv"), result.curves)
    save_config(os.path.join(out_dir, "train.cfg"), config)


def load_fit(out_dir):
    import os

    ranges = []
    with open(os.path.join(out_dir, "clips.txt")) as fh:
        for line in fh:
            t0, t1 = line.split()
            ranges.append((int(t0), int(t1)))
    models = [load_checkpoint(os.path.join(out_dir, f"clip{ci:02d}.ckpt"))
              for ci in range(len(ranges))]
    return FitResult(models=models, clip_ranges=ranges, curves=[])


def save_loss_csv(path, curves):
    with open(path, "w") as fh:
        fh.write("clip,step,rec,reg,total,alpha\n")
        for ci, curve in enumerate(curves):
            for p in curve:
                fh.write(f"{ci},{p.step},{p.rec:.9g},{p.reg:.9g},"
                         f"{p.total:.9g},{p.alpha:.9g}\n")


# ---------------------------------------------------------------------------
# config file: plain "key = value" lines, one per TrainConfig field


def save_config(path, config):
    with open(path, "w") as fh:
        for f in dc_fields(TrainConfig):
            fh.write(f"{f.name} = {getattr(config, f.name)}\n")


def load_config(path, overrides=None):
    known = {f.name: f.type for f in dc_fields(TrainConfig)}
    raw = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            if not sep or key not in known:
                raise ValueError(f"unknown config key {key!r} on line {lineno}")
            raw[key] = value.strip()
    if overrides:
        for key, value in overrides.items():
            if key not in known:
                raise ValueError(f"unknown config key {key!r} in overrides")
            raw[key] = value
    kwargs = {}
    defaults = TrainConfig()
    for key, value in raw.items():
        current = getattr(defaults, key)
        if isinstance(current, bool):
            kwargs[key] = str(value).lower() in ("1", "true", "yes")
        elif isinstance(current, int):
            kwargs[key] = int(value)
        elif isinstance(current, float):
            kwargs[key] = float(value)
        else:
            kwargs[key] = str(value)
    return TrainConfig(**kwargs)
