"""Spatiotemporal feature grids with sliding-window channel streaming.

A grid stores C_total = F + floor(k*(T-1)) feature channels per spatial
entry.  Frame t reads the F consecutive channels starting at floor(k*t),
rearranged so that global channel c sits at local slot c mod F; shared
channels therefore keep their slot across adjacent frames, which is what
makes temporal interpolation of the local feature vector meaningful.

Two backbones: "dense" keeps a (n_nodes, C_total) table interpolated
bi/tri-linearly; "cp" keeps, per channel, one (extent, R) factor table per
axis and evaluates sum_r prod_axis of linearly interpolated factors.
Sampling is differentiable w.r.t. both storage and the query point.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
import math

import numpy as np

from . import grad

__all__ = [
    "ChannelWindow",
    "StreamGrid",
    "as_ratio",
    "channel_window",
    "total_channels",
    "frame_chunk_channels",
    "cp_fit_2d",
]


def as_ratio(k):
    """Exact rational for the channels-per-frame rate k.

    Floats go through their decimal repr so e.g. 0.05 means exactly 1/20.
    """
    if isinstance(k, Fraction):
        r = k
    elif isinstance(k, int):
        r = Fraction(k)
    else:
        r = Fraction(str(k))
    if r <= 0:
        raise ValueError(f"k must be positive, got {k}")
    return r


def _window_start(t, k):
    # floor(k*t) in exact arithmetic
    return (k.numerator * t) // k.denominator


def total_channels(F, k, T):
    """Channel-axis length F + floor(k*(T-1)) of the backing storage."""
    if T < 1:
        raise ValueError(f"frame count must be >= 1, got {T}")
    if F < 1:
        raise ValueError(f"feature dimension must be >= 1, got {F}")
    k = as_ratio(k)
    return F + _window_start(T - 1, k)


@dataclass(frozen=True)
class ChannelWindow:
    """The F global channels used by one frame and their local slots."""

    t: int
    globals_: tuple
    locals_: tuple  # locals_[i] == globals_[i] % F

    @property
    def slot_channels(self):
        """Global channel stored at each local slot, e.g. [4, 5, 2, 3]."""
        slots = [0] * len(self.globals_)
        for c, loc in zip(self.globals_, self.locals_):
            slots[loc] = c
        return slots


def channel_window(t, k, F, T):
    """Window of frame t: globals floor(k*t)..+F-1, slot of c is c mod F."""
    if not 0 <= t <= T - 1:
        raise ValueError(f"frame {t} out of range [0, {T - 1}]")
    k = as_ratio(k)
    s = _window_start(int(t), k)
    globals_ = tuple(range(s, s + F))
    locals_ = tuple(c % F for c in globals_)
    return ChannelWindow(t=int(t), globals_=globals_, locals_=locals_)


def frame_chunk_channels(t, k, F, T):
    """Global channels newly stored when advancing to frame t.

    The range floor(k*(t-1))+F .. floor(k*t)+F-1.  When k <= F this equals
    window(t) minus window(t-1); when k > F it also covers the channels the
    window jumps over, which the storage dimension F+k(T-1) still counts.
    """
    if t == 0:
        raise ValueError("frame 0 is the base payload, it has no chunk")
    if not 1 <= t <= T - 1:
        raise ValueError(f"frame {t} out of range [1, {T - 1}]")
    k = as_ratio(k)
    lo = _window_start(t - 1, k) + F
    hi = _window_start(t, k) + F
    return list(range(lo, hi))


class StreamGrid:
    """Explicit feature storage over [0,1]^d with windowed channels.

    dims: spatial extents (2 or 3 axes), node i of an axis with extent N
    sits at coordinate i/(N-1).  With T=1 the grid is static: its window is
    the identity and nothing ever streams.
    """

    def __init__(self, dims, F, k, T, backbone="dense", rank=None,
                 rng=None, init_scale=0.1, name="grid"):
        dims = tuple(int(d) for d in dims)
        if len(dims) not in (2, 3) or any(d < 2 for d in dims):
            raise ValueError(f"dims must be 2 or 3 extents >= 2, got {dims}")
        self.dims = dims
        self.F = int(F)
        self.k = as_ratio(k)
        self.T = int(T)
        self.backbone = backbone
        self.name = name
        self.n_channels = total_channels(self.F, self.k, self.T)
        self.n_nodes = math.prod(dims)
        self.clamp_events = 0  # out-of-range queries clamped, not rejected

        if backbone == "dense":
            self.rank = None
            data = (np.zeros((self.n_nodes, self.n_channels)) if rng is None
                    else rng.normal(0.0, init_scale,
                                    (self.n_nodes, self.n_channels)))
            self.storage = grad.parameter(data, name=f"{name}.storage")
        elif backbone == "cp":
            if rank is None or rank < 1:
                raise ValueError(f"cp backbone needs a positive rank, got {rank}")
            self.rank = int(rank)
            # Per channel, one (extent, R) factor table per axis.  Keeping
            # channels separate makes the per-channel streaming payload
            # exactly R * sum(dims) scalars.
            axis_scale = init_scale ** (1.0 / len(dims))
            self.factors = []
            for c in range(self.n_channels):
                per_axis = []
                for a, extent in enumerate(dims):
                    data = (np.zeros((extent, self.rank)) if rng is None
                            else rng.normal(0.0, axis_scale,
                                            (extent, self.rank)))
                    per_axis.append(grad.parameter(
                        data, name=f"{name}.c{c}.ax{a}"))
                self.factors.append(per_axis)
        else:
            raise ValueError(f"unknown backbone {backbone!r}")

    # -- channel bookkeeping -------------------------------------------------

    def window(self, t):
        return channel_window(t, self.k, self.F, self.T)

    def chunk_channels(self, t):
        return frame_chunk_channels(t, self.k, self.F, self.T)

    def parameters(self):
        if self.backbone == "dense":
            return [self.storage]
        return [f for per_channel in self.factors for f in per_channel]

    # -- sampling -------------------------------------------------------------

    def _locate(self, p):
        """Clamp (N,d) query points and split into cell index + fraction.

        Returns (p_clamped Tensor, i0 int array (N,d), frac Tensors per axis).
        """
        if not isinstance(p, grad.Tensor):
            p = grad.constant(np.asarray(p, dtype=np.float64))
        if p.data.ndim != 2 or p.data.shape[1] != len(self.dims):
            raise ValueError(
                f"query points must be (N, {len(self.dims)}), got {p.shape}")
        if (p.data < 0.0).any() or (p.data > 1.0).any():
            self.clamp_events += 1
            p = grad.clamp(p, 0.0, 1.0)
        i0 = np.empty(p.data.shape, dtype=np.int64)
        fracs = []
        for a, extent in enumerate(self.dims):
            gx = grad.scale(grad.take_column(p, a), extent - 1)
            ia = np.clip(np.floor(gx.data).astype(np.int64), 0, extent - 2)
            i0[:, a] = ia
            fracs.append(grad.sub(gx, grad.constant(ia.astype(np.float64))))
        return p, i0, fracs

    def _corner_weights(self, fracs, n):
        """Multilinear corner weights as (offsets, weight Tensor) pairs."""
        ones = grad.constant(np.ones(n))
        out = []
        d = len(self.dims)
        for corner in range(1 << d):
            offs = [(corner >> a) & 1 for a in range(d)]
            w = None
            for a, off in enumerate(offs):
                wa = fracs[a] if off else grad.sub(ones, fracs[a])
                w = wa if w is None else grad.mul(w, wa)
            out.append((offs, w))
        return out

    def _flat_index(self, i0, offs):
        idx = np.zeros(i0.shape[0], dtype=np.int64)
        for a, extent in enumerate(self.dims):
            idx = idx * extent + (i0[:, a] + offs[a])
        return idx

    def sample_windows(self, p, windows):
        """Spatially interpolate several channel windows at shared points.

        Returns one (N, F) Tensor per window; the expensive gathers are
        shared across windows.
        """
        p, i0, fracs = self._locate(p)
        n = p.data.shape[0]
        corners = self._corner_weights(fracs, n)

        if self.backbone == "dense":
            idx = np.stack([self._flat_index(i0, offs)
                            for offs, _ in corners], axis=1)
            weights = grad.concat_columns([w for _, w in corners])
            rows = grad.gather_interpolate(self.storage, idx, weights)
            return [grad.take_columns(rows, win.slot_channels)
                    for win in windows]

        # cp backbone: per axis, 1D-interpolated factors, then per-channel
        # product over axes summed over rank.
        ones = grad.constant(np.ones(n))
        needed = sorted({c for win in windows for c in win.slot_channels})
        interp = {}
        for c in needed:
            per_axis = []
            for a in range(len(self.dims)):
                table = self.factors[c][a]
                lo = grad.gather_rows(table, i0[:, a])
                hi = grad.gather_rows(table, i0[:, a] + 1)
                fa = fracs[a]
                per_axis.append(grad.add(
                    grad.rowscale(lo, grad.sub(ones, fa)),
                    grad.rowscale(hi, fa)))
            prod = per_axis[0]
            for ax in per_axis[1:]:
                prod = grad.mul(prod, ax)
            interp[c] = grad.tsum(prod, axis=1)
        return [grad.concat_columns([interp[c] for c in win.slot_channels])
                for win in windows]

    def sample_spatial(self, p, window):
        """(N, F) features of one window, ordered by local slot."""
        return self.sample_windows(p, [window])[0]

    def sample_spacetime(self, p, t):
        """Features at continuous time t in [0, T-1]: lerp of frame windows.

        t may be a scalar (all points share one time) or an (N,) array of
        per-point times; mixed times are grouped internally.
        """
        ts = np.asarray(t, dtype=np.float64)
        if ts.ndim == 0:
            return self._sample_single_time(p, float(ts))
        if not isinstance(p, grad.Tensor):
            p = grad.constant(np.asarray(p, dtype=np.float64))
        if ts.shape != (p.shape[0],):
            raise ValueError(
                f"per-point times must be ({p.shape[0]},), got {ts.shape}")
        values = np.unique(ts)
        if values.size == 1:
            return self._sample_single_time(p, float(values[0]))
        pieces = []
        order = []
        for tv in values:
            sel = np.where(ts == tv)[0]
            rows = grad.gather_rows(p, sel) if p.requires_grad \
                else grad.constant(p.data[sel])
            pieces.append(self._sample_single_time(rows, float(tv)))
            order.append(sel)
        inverse = np.argsort(np.concatenate(order), kind="stable")
        return grad.gather_rows(grad.concat_rows(pieces), inverse)

    def _sample_single_time(self, p, t):
        if not 0.0 <= t <= self.T - 1:
            raise ValueError(f"time {t} out of range [0, {self.T - 1}]")
        ts = int(math.floor(t))
        if t == ts:
            return self.sample_spatial(p, self.window(ts))
        v0, v1 = self.sample_windows(p, [self.window(ts), self.window(ts + 1)])
        return grad.add(grad.scale(v0, (ts + 1) - t), grad.scale(v1, t - ts))


def cp_fit_2d(target, rank):
    """Least-squares CP factors (U, V) for a 2D table via truncated SVD.

    target is (Nx, Ny); returns U (Nx, R), V (Ny, R) with U @ V.T the best
    rank-R approximation (exact when rank >= matrix rank).
    """
    u, s, vt = np.linalg.svd(np.asarray(target, dtype=np.float64),
                             full_matrices=False)
    r = min(int(rank), s.size)
    su = u[:, :r] * np.sqrt(s[:r])
    sv = vt[:r, :].T * np.sqrt(s[:r])
    if r < rank:
        su = np.pad(su, ((0, 0), (0, rank - r)))
        sv = np.pad(sv, ((0, 0), (0, rank - r)))
    return su, sv
