"""Frequency dynamic convolution.

The output at frequency bin ``f`` is a softmax-weighted mixture of ``K``
static 3x3 convolutions, with the mixing weights predicted from the
time-averaged input. Because the weights differ per bin the layer is not
equivariant to shifts along frequency.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import nn
from .params import ParamSet, conv_fans, xavier_uniform
from .tensor import Tensor, make_result, mean, relu, softmax


def attention_hidden(cin: int, k: int) -> int:
    return max(cin // 4, k)


def init_fdy(
    params: ParamSet,
    prefix: str,
    cin: int,
    cout: int,
    k: int = 4,
    hidden: int | None = None,
    rng: np.random.Generator | None = None,
) -> None:
    """Register the basis kernels and the attention branch under ``prefix``."""
    rng = rng if rng is not None else np.random.default_rng(0)
    hidden = hidden if hidden is not None else attention_hidden(cin, k)
    fi, fo = conv_fans((cout, cin, 3, 3))
    params.add(f"{prefix}.weight", xavier_uniform(rng, (k, cout, cin, 3, 3), fi, fo))
    params.add(f"{prefix}.bias", np.zeros((k, cout)))
    fi, fo = conv_fans((hidden, cin, 3))
    params.add(f"{prefix}.att.conv1", xavier_uniform(rng, (hidden, cin, 3), fi, fo))
    params.add(f"{prefix}.att.bn.gamma", np.ones(hidden))
    params.add(f"{prefix}.att.bn.beta", np.zeros(hidden))
    params.add_buffer(f"{prefix}.att.bn.mean", np.zeros(hidden))
    params.add_buffer(f"{prefix}.att.bn.var", np.ones(hidden))
    fi, fo = conv_fans((k, hidden, 3))
    params.add(f"{prefix}.att.conv2", xavier_uniform(rng, (k, hidden, 3), fi, fo))
    params.add(f"{prefix}.att.conv2_bias", np.zeros(k))


def fdy_attention(
    x: Tensor,
    params: ParamSet,
    prefix: str,
    training: bool = False,
    temperature: float = 1.0,
    bn_momentum: float = 0.1,
    bn_eps: float = 1e-5,
) -> Tensor:
    """Per-frequency basis weights ``(B, K, F)``; they sum to one over ``K``."""
    pooled = mean(x, axis=2)  # (B, Cin, F)
    h = nn.conv1d(pooled, params[f"{prefix}.att.conv1"])
    h = nn.batch_norm(
        h,
        params[f"{prefix}.att.bn.gamma"],
        params[f"{prefix}.att.bn.beta"],
        params.buffer(f"{prefix}.att.bn.mean"),
        params.buffer(f"{prefix}.att.bn.var"),
        training,
        momentum=bn_momentum,
        eps=bn_eps,
    )
    h = relu(h)
    logits = nn.conv1d(h, params[f"{prefix}.att.conv2"], params[f"{prefix}.att.conv2_bias"])
    if temperature != 1.0:
        logits = logits * (1.0 / temperature)
    return softmax(logits, axis=1)


def dynamic_conv(x: Tensor, w: Tensor, b: Tensor, att: Tensor) -> Tensor:
    """Same-padded 3x3 convolution whose kernel is mixed per frequency bin.

    ``out[b, :, :, f]`` is the response of ``sum_k att[b, k, f] * w[k]`` (and
    the matching bias mixture) at bin ``f``. Mixing the kernels before the
    matmul costs a quarter of convolving with every basis separately.

    Args:
        x: input ``(B, Cin, T, F)``.
        w: basis kernels ``(K, Cout, Cin, 3, 3)``.
        b: basis biases ``(K, Cout)``.
        att: mixing weights ``(B, K, F)``.
    """
    X, W, Bk, A = x.data, w.data, b.data, att.data
    B, Cin, T, F = X.shape
    K, Cout = W.shape[:2]
    xp = np.zeros((B, Cin, T + 2, F + 2))
    xp[:, :, 1:-1, 1:-1] = X
    # cols[b, f] is the (Cin * 9, T) patch matrix feeding output bin f
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # (B, Cin, T, F, 3, 3)
    cols = np.ascontiguousarray(win.transpose(0, 3, 1, 4, 5, 2)).reshape(B, F, Cin * 9, T)
    wk = W.reshape(K, Cout, Cin * 9)
    # a plain matmul keeps wm C-contiguous, which batched matmul needs to stay fast
    wm = (A.transpose(0, 2, 1).reshape(B * F, K) @ wk.reshape(K, -1)).reshape(B, F, Cout, Cin * 9)
    bm = np.einsum("bkf,ko->bfo", A, Bk)
    out = np.matmul(wm, cols) + bm[..., None]  # (B, F, Cout, T)
    out = np.ascontiguousarray(out.transpose(0, 2, 3, 1))

    def backward(g):
        gt = np.ascontiguousarray(g.transpose(0, 3, 1, 2))  # (B, F, Cout, T)
        gbm = gt.sum(axis=3)
        gx = gw = gb = ga = None
        if w.requires_grad or att.requires_grad:
            gwm = np.matmul(gt, cols.transpose(0, 1, 3, 2))  # (B, F, Cout, Cin * 9)
            if w.requires_grad:
                gw = np.einsum("bkf,bfoc->koc", A, gwm, optimize=True).reshape(W.shape)
            if att.requires_grad:
                ga = np.einsum("bfoc,koc->bkf", gwm, wk, optimize=True)
                ga += np.einsum("bfo,ko->bkf", gbm, Bk)
        if b.requires_grad:
            gb = np.einsum("bkf,bfo->ko", A, gbm)
        if x.requires_grad:
            gcols = np.matmul(wm.transpose(0, 1, 3, 2), gt).reshape(B, F, Cin, 3, 3, T)
            gxp = np.zeros_like(xp)
            for i in range(3):
                for j in range(3):
                    gxp[:, :, i : i + T, j : j + F] += gcols[:, :, :, i, j, :].transpose(0, 2, 3, 1)
            gx = gxp[:, :, 1:-1, 1:-1]
        return gx, gw, gb, ga

    return make_result(out, (x, w, b, att), backward)


def fdy_forward(
    x: Tensor,
    params: ParamSet,
    prefix: str,
    training: bool = False,
    temperature: float = 1.0,
    bn_momentum: float = 0.1,
    bn_eps: float = 1e-5,
) -> Tensor:
    """``(B, Cin, T, F) -> (B, Cout, T, F)``.

    The K basis kernels are mixed bin by bin with the attention weights and
    the mixed kernel is applied as a same-padded convolution.
    """
    att = fdy_attention(x, params, prefix, training, temperature, bn_momentum, bn_eps)
    return dynamic_conv(x, params[f"{prefix}.weight"], params[f"{prefix}.bias"], att)
