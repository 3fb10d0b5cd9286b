"""The five scene fields and their probability-weighted blend.

A SceneModel owns three feature grids and four decoders:

  * decomposition: streamed grid V_f + small MLP -> 3 logits -> softmax
    probabilities (static, deforming, new) per point;
  * stationary: static grid V_s + tiny decoder conditioned on a
    low-frequency time encoding (time-invariant geometry, slow appearance);
  * deformation: MLP mapping an encoded (point, time) to a displacement;
    the displaced point queries the stationary field (its canonical space);
  * newness: streamed grid V_n sampled directly, no decoder;
  * radiance: MLP decoding the blended feature (+ encoded view direction)
    to density and color; a 2D "direct" mode decodes straight to color.

The blend v = P_static*v_static + P_deform*v_deform + P_new*v_new runs per
batch of points; branches whose probability stays below the skip threshold
contribute exactly zero and are not evaluated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import grad
from .feature_grid import StreamGrid, as_ratio

__all__ = [
    "MlpSpec",
    "Mlp",
    "Probabilities",
    "RadianceSample",
    "ModelConfig",
    "SceneModel",
    "freq_encode",
    "encoded_dim",
]

ABLATIONS = ("none", "no-static", "no-deform", "no-new")
_BRANCH_COLUMN = {"no-static": 0, "no-deform": 1, "no-new": 2}


def freq_encode(x, levels):
    """Per-component frequency features [x, sin(2^i pi x), cos(2^i pi x)].

    levels == 0 yields an empty encoding (no path for that input at all);
    otherwise the raw component is kept alongside the sin/cos pairs.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if levels == 0:
        return np.zeros((x.shape[0], 0))
    parts = [x]
    for i in range(levels):
        ang = (2.0 ** i) * np.pi * x
        parts.append(np.sin(ang))
        parts.append(np.cos(ang))
    return np.concatenate(parts, axis=1)


def encoded_dim(components, levels):
    return 0 if levels == 0 else components * (1 + 2 * levels)


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of one decoder: widths plus input encoding levels."""

    in_dim: int
    hidden: tuple
    out_dim: int
    encodings: tuple = ()  # (group name, components, levels) triples

    def __post_init__(self):
        if self.out_dim < 1 or any(w < 1 for w in self.hidden):
            raise ValueError(f"invalid MLP widths {self.hidden}->{self.out_dim}")


class Mlp:
    """Fully connected net; relu on hidden layers, identity output."""

    def __init__(self, spec, rng, name, zero_last=False):
        self.spec = spec
        self.name = name
        widths = [spec.in_dim, *spec.hidden, spec.out_dim]
        self.layers = []
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            last = i == len(widths) - 2
            if zero_last and last:
                w = np.zeros((a, b))
            else:
                w = rng.normal(0.0, np.sqrt(2.0 / a), (a, b))
            self.layers.append((
                grad.parameter(w, name=f"{name}.w{i}"),
                grad.parameter(np.zeros(b), name=f"{name}.b{i}"),
            ))

    def __call__(self, x):
        h = x
        for i, (w, b) in enumerate(self.layers):
            h = grad.add(grad.matmul(h, w), b)
            if i < len(self.layers) - 1:
                h = grad.relu(h)
        return h

    def parameters(self):
        return [t for pair in self.layers for t in pair]


@dataclass(frozen=True)
class Probabilities:
    """Per-point simplex (static, deforming, new)."""

    static: float
    deform: float
    new: float

    def __post_init__(self):
        vals = (self.static, self.deform, self.new)
        if any(not 0.0 <= v <= 1.0 for v in vals):
            raise ValueError(f"probabilities outside [0,1]: {vals}")
        if abs(sum(vals) - 1.0) > 1e-9:
            raise ValueError(f"probabilities sum to {sum(vals)}, not 1")


@dataclass(frozen=True)
class RadianceSample:
    """Volume density (per unit length) and color of one point."""

    sigma: float
    rgb: tuple

    def __post_init__(self):
        if self.sigma < 0.0:
            raise ValueError(f"density must be >= 0, got {self.sigma}")
        if len(self.rgb) != 3 or any(not 0.0 <= c <= 1.0 for c in self.rgb):
            raise ValueError(f"rgb outside [0,1]: {self.rgb}")


@dataclass
class ModelConfig:
    """Hyperparameters of a SceneModel; defaults are the desk-scale setup."""

    mode: str = "direct-2d"  # or "volumetric-3d"
    dims: tuple = (64, 64)
    F: int = 4
    k: object = 1  # exact rational; int/float/str accepted
    T: int = 30
    backbone: str = "dense"
    rank: int = 8  # cp backbone only
    tau: float = 1e-3
    pos_levels: int = 6
    def_time_levels: int = 2
    stat_time_levels: int = 1
    dir_levels: int = 4
    decomp_hidden: tuple = (32,)
    stat_hidden: tuple = (64,)
    deform_hidden: tuple = (64, 64, 64)
    radiance_hidden: tuple = (64, 64, 64)
    color_hidden: tuple = (64, 64)
    seed: int = 0
    # scene bounds and background, carried into packed streams so a stream
    # is renderable on its own
    near: float = 0.6
    far: float = 3.6
    background: float = 1.0

    def __post_init__(self):
        if self.mode not in ("direct-2d", "volumetric-3d"):
            raise ValueError(f"unknown mode {self.mode!r}")
        want = 2 if self.mode == "direct-2d" else 3
        if len(self.dims) != want:
            raise ValueError(
                f"mode {self.mode} needs {want}D grid dims, got {self.dims}")
        self.k = as_ratio(self.k)
        self.dims = tuple(int(d) for d in self.dims)

    def to_dict(self):
        from dataclasses import fields as dc_fields
        out = {}
        for f in dc_fields(ModelConfig):
            v = getattr(self, f.name)
            if f.name == "k":
                out["k_num"] = v.numerator
                out["k_den"] = v.denominator
            elif isinstance(v, tuple):
                out[f.name] = list(v)
            else:
                out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, d):
        from dataclasses import fields as dc_fields
        from fractions import Fraction
        kwargs = {}
        for f in dc_fields(ModelConfig):
            if f.name == "k":
                kwargs["k"] = Fraction(d["k_num"], d["k_den"])
            elif isinstance(f.default, tuple) or f.name == "dims":
                kwargs[f.name] = tuple(d[f.name])
            else:
                kwargs[f.name] = d[f.name]
        return cls(**kwargs)


class SceneModel:
    """Decomposed dynamic scene: grids, decoders and blend logic."""

    def __init__(self, config, rng=None):
        self.config = config
        self.ablate = "none"
        if rng is None:
            rng = np.random.default_rng(config.seed)
        c = config
        d = len(c.dims)
        kw = dict(backbone=c.backbone, rank=c.rank if c.backbone == "cp" else None)

        self.V_f = StreamGrid(c.dims, c.F, c.k, c.T, rng=rng,
                              name="decomp_grid", **kw)
        self.decomp_mlp = Mlp(MlpSpec(c.F, tuple(c.decomp_hidden), 3),
                              rng, "decomp_mlp")
        self.V_s = StreamGrid(c.dims, c.F, 1, 1, rng=rng,
                              name="static_grid", **kw)
        stat_in = c.F + encoded_dim(1, c.stat_time_levels)
        self.stat_mlp = Mlp(
            MlpSpec(stat_in, tuple(c.stat_hidden), c.F,
                    encodings=(("time", 1, c.stat_time_levels),)),
            rng, "stat_mlp")
        deform_in = encoded_dim(d, c.pos_levels) + encoded_dim(1, c.def_time_levels)
        # zero output layer: training starts from the identity warp
        self.deform_mlp = Mlp(
            MlpSpec(deform_in, tuple(c.deform_hidden), d,
                    encodings=(("point", d, c.pos_levels),
                               ("time", 1, c.def_time_levels))),
            rng, "deform_mlp", zero_last=True)
        self.V_n = StreamGrid(c.dims, c.F, c.k, c.T, rng=rng,
                              name="new_grid", **kw)
        if c.mode == "volumetric-3d":
            rad_in = c.F + encoded_dim(3, c.dir_levels)
            self.radiance_mlp = Mlp(
                MlpSpec(rad_in, tuple(c.radiance_hidden), 4,
                        encodings=(("dir", 3, c.dir_levels),)),
                rng, "radiance_mlp")
            self.color_mlp = None
        else:
            self.radiance_mlp = None
            self.color_mlp = Mlp(MlpSpec(c.F, tuple(c.color_hidden), 3),
                                 rng, "color_mlp")

    # -- plumbing -------------------------------------------------------------

    def mlps(self):
        out = {"decomp_mlp": self.decomp_mlp, "stat_mlp": self.stat_mlp,
               "deform_mlp": self.deform_mlp}
        if self.radiance_mlp is not None:
            out["radiance_mlp"] = self.radiance_mlp
        if self.color_mlp is not None:
            out["color_mlp"] = self.color_mlp
        return out

    def parameters(self):
        params = []
        for g in (self.V_f, self.V_s, self.V_n):
            params.extend(g.parameters())
        for mlp in self.mlps().values():
            params.extend(mlp.parameters())
        return params

    def time_unit(self, t):
        if self.config.T <= 1:
            return np.zeros_like(np.asarray(t, dtype=np.float64))
        return np.asarray(t, dtype=np.float64) / (self.config.T - 1)

    def _check_points(self, p):
        p = np.asarray(p, dtype=np.float64)
        want = len(self.config.dims)
        if p.ndim != 2 or p.shape[1] != want:
            raise ValueError(f"points must be (N, {want}), got {p.shape}")
        return p

    def _time_column(self, t, n):
        """Times as an (n, 1) column; scalars broadcast over the batch."""
        ts = np.asarray(t, dtype=np.float64)
        if ts.ndim == 0:
            return np.full((n, 1), float(ts))
        if ts.shape != (n,):
            raise ValueError(f"times must be scalar or ({n},), got {ts.shape}")
        return ts[:, None]

    # -- the five fields --------------------------------------------------------

    def decompose(self, p, t):
        """(N, 3) simplex probabilities; ablated branches get exactly 0."""
        feats = self.V_f.sample_spacetime(p, t)
        logits = self.decomp_mlp(feats)
        if self.ablate == "none":
            return grad.softmax(logits)
        drop = _BRANCH_COLUMN[self.ablate]
        keep = [c for c in range(3) if c != drop]
        sub = grad.softmax(grad.take_columns(logits, keep))
        n = logits.shape[0]
        cols = {keep[0]: grad.take_column(sub, 0),
                keep[1]: grad.take_column(sub, 1),
                drop: grad.constant(np.zeros(n))}
        return grad.concat_columns([cols[0], cols[1], cols[2]])

    def decompose_point(self, p, t):
        row = self.decompose(self._check_points(p).reshape(1, -1), t).data[0]
        return Probabilities(static=row[0], deform=row[1], new=row[2])

    def stationary_feature(self, p, t):
        """Static-grid features decoded with the low-frequency time input."""
        feats = self.V_s.sample_spacetime(p, 0)
        if self.config.stat_time_levels:
            tcol = self._time_column(self.time_unit(t), feats.shape[0])
            enc = freq_encode(tcol, self.config.stat_time_levels)
            feats = grad.concat_columns([feats, grad.constant(enc)])
        return self.stat_mlp(feats)

    def deform(self, p, t):
        """(N, d) displacement of each point at time t."""
        p = self._check_points(p)
        parts = [freq_encode(p, self.config.pos_levels)]
        if self.config.def_time_levels:
            tcol = self._time_column(self.time_unit(t), p.shape[0])
            parts.append(freq_encode(tcol, self.config.def_time_levels))
        return self.deform_mlp(grad.constant(np.concatenate(parts, axis=1)))

    def newness_feature(self, p, t):
        return self.V_n.sample_spacetime(p, t)

    def blended_feature(self, p, t, tau=0.0):
        """Probability-weighted feature blend.

        Returns (v, probs): v is (N, F), probs the (N, 3) decomposition.
        Branches whose probability is below tau for every point in the batch
        are skipped entirely; per-point sub-tau weights are zeroed exactly.
        """
        p = self._check_points(p)
        probs = self.decompose(p, t)
        n, F = p.shape[0], self.config.F
        v = None
        for col, branch in enumerate(("static", "deform", "new")):
            pv = probs.data[:, col]
            live = pv >= tau if tau > 0.0 else pv > 0.0
            if not live.any():
                continue
            if branch == "static":
                feats = self.stationary_feature(p, t)
            elif branch == "deform":
                delta = self.deform(p, t)
                q = grad.clamp(grad.add(grad.constant(p), delta), 0.0, 1.0)
                feats = self.stationary_feature(q, t)
            else:
                feats = self.newness_feature(p, t)
            w = grad.take_column(probs, col)
            if not live.all():
                w = grad.mul(w, grad.constant(live.astype(np.float64)))
            term = grad.rowscale(feats, w)
            v = term if v is None else grad.add(v, term)
        if v is None:
            v = grad.constant(np.zeros((n, F)))
        return v, probs

    def decode_radiance(self, v, dirs):
        """(sigma (N,), rgb (N, 3)) from blended features and view directions."""
        if self.radiance_mlp is None:
            raise ValueError("decode_radiance needs volumetric-3d mode")
        dirs = np.asarray(dirs, dtype=np.float64)
        norms = np.linalg.norm(dirs, axis=-1)
        if np.abs(norms - 1.0).max() > 1e-6:
            raise ValueError(
                f"view directions must be unit length, worst |d|={norms.max()}")
        enc = grad.constant(freq_encode(dirs, self.config.dir_levels))
        out = self.radiance_mlp(grad.concat_columns([v, enc]))
        sigma = grad.softplus(grad.take_column(out, 0))
        rgb = grad.sigmoid(grad.take_columns(out, [1, 2, 3]))
        return sigma, rgb

    def decode_radiance_point(self, v, direction):
        sigma, rgb = self.decode_radiance(v, np.asarray(direction)[None, :])
        return RadianceSample(sigma=float(sigma.data[0]),
                              rgb=tuple(rgb.data[0]))

    def direct_color(self, v):
        """(N, 3) colors straight from features; 2D toy mode only."""
        if self.color_mlp is None:
            raise ValueError("direct_color needs direct-2d mode")
        return grad.sigmoid(self.color_mlp(v))
