"""The volume-rendering quadrature, checked against physics.

A ray accumulates color with weights w_i = T_i * alpha_i where
alpha_i = 1 - exp(-sigma_i * delta_i) and T_i is the transmittance
surviving the earlier segments.  For a homogeneous medium the integral has
the closed form C = c * (1 - exp(-sigma * L)), which the discretization
reproduces; that is the oracle the test suite pins the renderer to.
"""

import numpy as np

from streamfields.render import (
    RenderConfig, bin_deltas, camera_from_lookat, composite, render_image)
from streamfields.fields import ModelConfig, SceneModel

# --- homogeneous medium vs closed form ---------------------------------------
sigma, L = 1.3, 1.0
for n in (8, 64, 512):
    deltas = bin_deltas(0.0, L, n)
    rgb, opacity, _ = composite(np.full(n, sigma),
                                np.tile([1.0, 0.0, 0.0], (n, 1)), deltas)
    exact = 1.0 - np.exp(-sigma * L)
    print(f"n={n:4d}: rendered {rgb[0]:.6f}  closed form {exact:.6f}")

# --- weights behave like an absorption budget ---------------------------------
rng = np.random.default_rng(1)
sig = rng.uniform(0, 4, 32)
_, opacity, weights = composite(sig, rng.uniform(0, 1, (32, 3)),
                                bin_deltas(0.0, 2.0, 32))
print(f"\nweights sum to opacity: {weights.sum():.6f} == {opacity:.6f}")
print(f"never exceeding 1: {weights.sum() <= 1.0}")

# --- a tiny end-to-end render --------------------------------------------------
cfg = ModelConfig(mode="volumetric-3d", dims=(12, 12, 12), F=4, k=1, T=2,
                  decomp_hidden=(16,), stat_hidden=(16,), deform_hidden=(16,),
                  radiance_hidden=(16,), seed=3)
model = SceneModel(cfg)
cam = camera_from_lookat([0.5, 1.1, 2.4], [0.5, 0.5, 0.5], [0, 1, 0],
                         fov_deg=50, width=48, height=48)
img = render_image(model, cam, 0.0, RenderConfig(n_samples=24, near=0.6,
                                                 far=3.6))
print(f"\nuntrained model renders a {img.shape} image, "
      f"range [{img.min():.3f}, {img.max():.3f}]")
print("(train it first if you want it to look like something)")
