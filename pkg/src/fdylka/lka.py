"""Large kernel attention block.

An attention map is built from a pointwise projection, GELU, a depthwise
conv, a dilated depthwise conv and a second projection; it gates the input
multiplicatively. A batch-normalized convolutional feed-forward stack follows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .params import ParamSet, conv_fans, xavier_uniform
from .tensor import Tensor, add, gelu, mul


@dataclass(frozen=True)
class LkaConfig:
    local_kernel: int = 5
    dilated_kernel: int = 7
    dilation: int = 3
    ffn_kernel: int = 3
    ffn_expansion: int = 1
    residual: bool = True

    @property
    def receptive_field(self) -> int:
        return self.local_kernel + (self.dilated_kernel - 1) * self.dilation


def _conv_param(params, rng, name, shape):
    fi, fo = conv_fans(shape)
    params.add(f"{name}.weight", xavier_uniform(rng, shape, fi, fo))
    params.add(f"{name}.bias", np.zeros(shape[0]))


def init_lka(
    params: ParamSet,
    prefix: str,
    channels: int,
    cfg: LkaConfig = LkaConfig(),
    rng: np.random.Generator | None = None,
) -> None:
    rng = rng if rng is not None else np.random.default_rng(0)
    C, E = channels, channels * cfg.ffn_expansion
    _conv_param(params, rng, f"{prefix}.proj_in", (C, C, 1, 1))
    _conv_param(params, rng, f"{prefix}.dw", (C, 1, cfg.local_kernel, cfg.local_kernel))
    _conv_param(
        params, rng, f"{prefix}.dw_dilated", (C, 1, cfg.dilated_kernel, cfg.dilated_kernel)
    )
    _conv_param(params, rng, f"{prefix}.proj_attn", (C, C, 1, 1))
    params.add(f"{prefix}.norm.gamma", np.ones(C))
    params.add(f"{prefix}.norm.beta", np.zeros(C))
    params.add_buffer(f"{prefix}.norm.mean", np.zeros(C))
    params.add_buffer(f"{prefix}.norm.var", np.ones(C))
    _conv_param(params, rng, f"{prefix}.ffn.fc1", (E, C, 1, 1))
    _conv_param(params, rng, f"{prefix}.ffn.dw", (E, 1, cfg.ffn_kernel, cfg.ffn_kernel))
    _conv_param(params, rng, f"{prefix}.ffn.fc2", (C, E, 1, 1))


def _conv(x, params, name, cfg_dilation=1, depthwise=False):
    w = params[f"{name}.weight"]
    return nn.conv2d(
        x,
        w,
        params[f"{name}.bias"],
        dilation=cfg_dilation,
        groups=w.shape[0] if depthwise else 1,
    )


def lka_attention_map(x: Tensor, params: ParamSet, prefix: str, cfg: LkaConfig = LkaConfig()):
    a = _conv(x, params, f"{prefix}.proj_in")
    a = gelu(a)
    a = _conv(a, params, f"{prefix}.dw", depthwise=True)
    a = _conv(a, params, f"{prefix}.dw_dilated", cfg.dilation, depthwise=True)
    return _conv(a, params, f"{prefix}.proj_attn")


def ffn(u: Tensor, params: ParamSet, prefix: str) -> Tensor:
    h = _conv(u, params, f"{prefix}.ffn.fc1")
    h = _conv(h, params, f"{prefix}.ffn.dw", depthwise=True)
    h = gelu(h)
    return _conv(h, params, f"{prefix}.ffn.fc2")


def lka_block(
    x: Tensor,
    params: ParamSet,
    prefix: str,
    cfg: LkaConfig = LkaConfig(),
    training: bool = False,
    bn_momentum: float = 0.1,
    bn_eps: float = 1e-5,
) -> Tensor:
    """Shape-preserving attention + feed-forward block."""
    attended = mul(x, lka_attention_map(x, params, prefix, cfg))
    u = add(x, attended) if cfg.residual else attended
    normed = nn.batch_norm(
        u,
        params[f"{prefix}.norm.gamma"],
        params[f"{prefix}.norm.beta"],
        params.buffer(f"{prefix}.norm.mean"),
        params.buffer(f"{prefix}.norm.var"),
        training,
        momentum=bn_momentum,
        eps=bn_eps,
    )
    h = ffn(normed, params, prefix)
    return add(u, h) if cfg.residual else h
