"""A look inside the network's two distinctive blocks.

Frequency dynamic convolution mixes K basis kernels with weights that
depend on the frequency bin, and large kernel attention gates features
with a map built from cheap depthwise convolutions. Both are run on toy
inputs here, followed by a shape walk through the quarter-width model.
"""

import numpy as np

from fdylka.fdy import fdy_attention, fdy_forward, init_fdy
from fdylka.lka import LkaConfig, init_lka, lka_attention_map
from fdylka.model import ModelConfig, build_params, forward
from fdylka.params import ParamSet
from fdylka.tensor import Tensor

rng = np.random.default_rng(0)

# %% Frequency dynamic convolution
p = ParamSet()
init_fdy(p, "fdy", cin=4, cout=6, k=4, rng=rng)
x = Tensor(rng.standard_normal((1, 4, 20, 16)))
att = fdy_attention(x, p, "fdy").data[0]  # (K, F)
print("attention weights per bin sum to", np.unique(att.sum(axis=0).round(12)))
print("dominant basis per frequency bin:", att.argmax(axis=0))

# Shifting the input along frequency does not simply shift the output:
# each bin has its own effective kernel.
y = fdy_forward(x, p, "fdy").data
y_shift = fdy_forward(Tensor(np.roll(x.data, 3, axis=3)), p, "fdy").data
gap = np.abs(np.roll(y, 3, axis=3) - y_shift)[..., 4:-1].max()
print(f"max deviation from shift equivariance: {gap:.3f}")

# %% Large kernel attention: receptive field of the attention map
q = ParamSet()
init_lka(q, "lka", 3, LkaConfig(), rng)
impulse = np.zeros((1, 3, 41, 41))
impulse[0, :, 20, 20] = 1.0
base = lka_attention_map(Tensor(np.zeros_like(impulse)), q, "lka").data
resp = np.abs(lka_attention_map(Tensor(impulse), q, "lka").data - base).sum(axis=(0, 1))
rows = np.flatnonzero(resp.sum(axis=1) > 1e-12)
print(f"an impulse reaches {rows[-1] - rows[0] + 1} frames of the attention map")

# %% Shapes through the quarter-width model with embedding fusion
cfg = ModelConfig(class_count=3, width_scale=0.25, embedding_dim=768)
params = build_params(cfg, seed=0)
trace = []
out = forward(rng.standard_normal((1, 1001, 128)), params, cfg, rng.standard_normal((1, 250, 768)), trace=trace)
for name, shape in trace:
    print(f"  {name:<14}{shape}")
print("parameters:", sum(t.data.size for t in params.leaves.values()))
print("clip-level probabilities:", out.weak.data.round(3))
