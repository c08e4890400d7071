"""Layer primitives on :class:`~fdylka.tensor.Tensor`.

Feature maps use the ``batch × channel × frame × frequency`` layout. Every
function here carries its own hand-written backward pass; all of them are
covered by finite-difference gradient checks in the test suite.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _kernels
from .errors import ContractError, DimensionError
from .tensor import Tensor, _sigmoid, as_tensor, make_result, reshape

_AXIS_NAMES = ("batch", "channel", "frame", "frequency")


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (int, np.integer)):
        return int(v), int(v)
    a, b = v
    return int(a), int(b)


def _padding(padding, kernel, dilation) -> tuple[int, int, int, int]:
    """Return (top, bottom, left, right) zero padding."""
    if padding == "same":
        out = []
        for k, d in zip(kernel, dilation):
            total = d * (k - 1)
            out += [total // 2, total - total // 2]
        return tuple(out)
    if padding == "valid":
        return (0, 0, 0, 0)
    pt, pf = _pair(padding)
    return (pt, pt, pf, pf)


def _zero_pad(x: np.ndarray, pad) -> np.ndarray:
    pt0, pt1, pf0, pf1 = pad
    if not any(pad):
        return x
    B, C, T, F = x.shape
    out = np.zeros((B, C, T + pt0 + pt1, F + pf0 + pf1))
    out[:, :, pt0 : pt0 + T, pf0 : pf0 + F] = x
    return out


def _check_ndim(x: Tensor, ndim: int, what: str):
    if x.ndim != ndim:
        raise DimensionError(f"{what}: expected a {ndim}-D tensor, got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Tensor | None = None,
    stride=1,
    padding="same",
    dilation=1,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation with zero padding.

    Args:
        x: input ``(B, Cin, T, F)``.
        w: kernel ``(Cout, Cin // groups, kT, kF)``.
        b: optional bias ``(Cout,)``.
        stride, dilation: int or (frame, frequency) pair.
        padding: ``"same"``, ``"valid"``, or an int / pair.
        groups: number of channel groups; ``groups == Cin == Cout`` is depthwise.
    """
    x, w = as_tensor(x), as_tensor(w)
    _check_ndim(x, 4, "conv2d input")
    _check_ndim(w, 4, "conv2d kernel")
    B, Cin, T, F = x.shape
    Cout, Cg, kT, kF = w.shape
    if groups < 1 or Cin % groups or Cout % groups:
        raise DimensionError(
            f"channel axis: groups={groups} must divide Cin={Cin} and Cout={Cout}"
        )
    if Cg != Cin // groups:
        raise DimensionError(
            f"channel axis: kernel expects {Cg * groups} input channels, input has {Cin}"
        )
    if b is not None:
        b = as_tensor(b)
        if b.shape != (Cout,):
            raise DimensionError(f"channel axis: bias shape {b.shape} != ({Cout},)")
    stride, dilation = _pair(stride), _pair(dilation)
    if min(dilation) < 1 or min(stride) < 1:
        raise ContractError("stride and dilation must be >= 1")
    pad = _padding(padding, (kT, kF), dilation)
    for ax, n, p0, p1, k, d in (
        (2, T, pad[0], pad[1], kT, dilation[0]),
        (3, F, pad[2], pad[3], kF, dilation[1]),
    ):
        if n + p0 + p1 < d * (k - 1) + 1:
            raise DimensionError(
                f"{_AXIS_NAMES[ax]} axis: effective kernel {d * (k - 1) + 1} exceeds "
                f"padded input {n + p0 + p1}"
            )

    if groups == 1:
        out, backward = _conv_dense(x.data, w.data, stride, pad, dilation)
    elif groups == Cin == Cout and stride == (1, 1):
        out, backward = _conv_depthwise(x.data, w.data, pad, dilation)
    else:
        out, backward = _conv_grouped(x.data, w.data, stride, pad, dilation, groups)

    if b is not None:
        out += b.data[None, :, None, None]
        parents = (x, w, b)
    else:
        parents = (x, w)

    def grad_fn(g):
        gx, gw = backward(g, x.requires_grad, w.requires_grad)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return make_result(out, parents, grad_fn)


def _conv_dense(x, w, stride, pad, dilation):
    B, C, T, F = x.shape
    Cout, _, kT, kF = w.shape
    st, sf = stride
    dt, df = dilation
    if kT == kF == 1 and stride == (1, 1) and not any(pad):
        return _conv_pointwise(x, w)
    if stride == (1, 1):
        return _conv_dense_s1(x, w, pad, dilation)
    xp = _zero_pad(x, pad)
    eT, eF = dt * (kT - 1) + 1, df * (kF - 1) + 1
    win = sliding_window_view(xp, (eT, eF), axis=(2, 3))[:, :, ::st, ::sf, ::dt, ::df]
    To, Fo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * To * Fo, C * kT * kF)
    wmat = w.reshape(Cout, -1)
    out = (cols @ wmat.T).reshape(B, To, Fo, Cout).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def backward(g, need_x, need_w):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, Cout)
        gw = (gmat.T @ cols).reshape(w.shape) if need_w else None
        gx = None
        if need_x:
            gcols = (gmat @ wmat).reshape(B, To, Fo, C, kT, kF)
            gxp = np.zeros_like(xp)
            for i in range(kT):
                for j in range(kF):
                    gxp[
                        :,
                        :,
                        i * dt : i * dt + st * (To - 1) + 1 : st,
                        j * df : j * df + sf * (Fo - 1) + 1 : sf,
                    ] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad[0] : pad[0] + T, pad[2] : pad[2] + F]
        return gx, gw

    return out, backward


def _conv_dense_s1(x, w, pad, dilation):
    # Flattening the padded (T, F) plane turns every kernel tap into one
    # contiguous slice; rows wrap into Fp - Fo junk columns that are dropped.
    B, C, T, F = x.shape
    Cout, _, kT, kF = w.shape
    dt, df = dilation
    xp = _zero_pad(x, pad)
    Tp, Fp = xp.shape[2], xp.shape[3]
    To, Fo = Tp - dt * (kT - 1), Fp - df * (kF - 1)
    L = (To - 1) * Fp + Fo
    flat = xp.reshape(B, C, Tp * Fp)
    offsets = [(i, j, i * dt * Fp + j * df) for i in range(kT) for j in range(kF)]
    cols = np.empty((B, C, kT, kF, L))
    for i, j, off in offsets:
        cols[:, :, i, j] = flat[:, :, off : off + L]
    cols = cols.reshape(B, C * kT * kF, L)
    wmat = w.reshape(Cout, -1)
    full = np.zeros((B, Cout, To * Fp))
    np.matmul(wmat, cols, out=full[:, :, :L])
    out = np.ascontiguousarray(full.reshape(B, Cout, To, Fp)[:, :, :, :Fo])

    def backward(g, need_x, need_w):
        gfull = np.zeros((B, Cout, To, Fp))
        gfull[:, :, :, :Fo] = g
        gflat = gfull.reshape(B, Cout, To * Fp)[:, :, :L]
        gw = gx = None
        if need_w:
            gw = np.zeros((Cout, C * kT * kF))
            for b in range(B):
                gw += gflat[b] @ cols[b].T
            gw = gw.reshape(w.shape)
        if need_x:
            gcols = np.matmul(wmat.T, gflat).reshape(B, C, kT, kF, L)
            gxf = np.zeros((B, C, Tp * Fp))
            for i, j, off in offsets:
                gxf[:, :, off : off + L] += gcols[:, :, i, j]
            gx = gxf.reshape(B, C, Tp, Fp)[:, :, pad[0] : pad[0] + T, pad[2] : pad[2] + F]
        return gx, gw

    return out, backward


def _conv_pointwise(x, w):
    B, C, T, F = x.shape
    wmat = w[:, :, 0, 0]
    xf = x.reshape(B, C, T * F)
    out = np.matmul(wmat, xf).reshape(B, -1, T, F)

    def backward(g, need_x, need_w):
        gf = g.reshape(B, -1, T * F)
        gx = np.matmul(wmat.T, gf).reshape(x.shape) if need_x else None
        gw = None
        if need_w:
            gw = np.zeros(wmat.shape)
            for b in range(B):
                gw += gf[b] @ xf[b].T
            gw = gw[:, :, None, None]
        return gx, gw

    return out, backward


def _conv_depthwise(x, w, pad, dilation):
    B, C, T, F = x.shape
    dt, df = dilation
    xp = np.ascontiguousarray(_zero_pad(x, pad))
    kT, kF = w.shape[2], w.shape[3]
    To = xp.shape[2] - dt * (kT - 1)
    Fo = xp.shape[3] - df * (kF - 1)
    k = np.ascontiguousarray(w[:, 0])
    out = np.zeros((B, C, To, Fo))
    _kernels.depthwise_forward(xp, k, dt, df, out)

    def backward(g, need_x, need_w):
        g = np.ascontiguousarray(g)
        gx = gw = None
        if need_x:
            # transpose of a valid correlation = full correlation with the flipped kernel
            eT, eF = dt * (kT - 1), df * (kF - 1)
            gp = _zero_pad(g, (eT, eT, eF, eF))
            gxp = np.zeros(xp.shape)
            _kernels.depthwise_forward(gp, np.ascontiguousarray(k[:, ::-1, ::-1]), dt, df, gxp)
            gx = gxp[:, :, pad[0] : pad[0] + T, pad[2] : pad[2] + F]
        if need_w:
            gk = np.empty_like(k)
            _kernels.depthwise_backward_kernel(g, xp, dt, df, gk)
            gw = gk[:, None]
        return gx, gw

    return out, backward


def _conv_grouped(x, w, stride, pad, dilation, groups):
    C, Cout = x.shape[1], w.shape[0]
    ci, co = C // groups, Cout // groups
    parts = [
        _conv_dense(x[:, g * ci : (g + 1) * ci], w[g * co : (g + 1) * co], stride, pad, dilation)
        for g in range(groups)
    ]
    out = np.concatenate([p[0] for p in parts], axis=1)

    def backward(g, need_x, need_w):
        res = [p[1](g[:, i * co : (i + 1) * co], need_x, need_w) for i, p in enumerate(parts)]
        gx = np.concatenate([r[0] for r in res], axis=1) if need_x else None
        gw = np.concatenate([r[1] for r in res], axis=0) if need_w else None
        return gx, gw

    return out, backward


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, padding="same") -> Tensor:
    """1-D cross-correlation along the last axis: ``(B, Cin, L) -> (B, Cout, L')``."""
    _check_ndim(x, 3, "conv1d input")
    _check_ndim(w, 3, "conv1d kernel")
    B, C, L = x.shape
    x4 = reshape(x, (B, C, 1, L))
    w4 = reshape(w, (w.shape[0], w.shape[1], 1, w.shape[2]))
    if padding == "same":
        pad = "same"
    elif padding == "valid":
        pad = 0
    else:
        pad = (0, int(padding))
    y = conv2d(x4, w4, b, padding=pad)
    return reshape(y, (B, w.shape[0], y.shape[3]))


# ---------------------------------------------------------------------------
# pooling, normalization, regularization
# ---------------------------------------------------------------------------


def avg_pool2d(x: Tensor, window) -> Tensor:
    """Non-overlapping mean pooling; trailing remainders on each axis are dropped."""
    _check_ndim(x, 4, "avg_pool2d input")
    wt, wf = _pair(window)
    B, C, T, F = x.shape
    if wt > T:
        raise DimensionError(f"frame axis: pooling window {wt} larger than input {T}")
    if wf > F:
        raise DimensionError(f"frequency axis: pooling window {wf} larger than input {F}")
    To, Fo = T // wt, F // wf
    crop = x.data[:, :, : To * wt, : Fo * wf]
    out = crop.reshape(B, C, To, wt, Fo, wf).mean(axis=(3, 5))

    def backward(g):
        gx = np.zeros_like(x.data)
        up = np.repeat(np.repeat(g, wt, axis=2), wf, axis=3) / (wt * wf)
        gx[:, :, : To * wt, : Fo * wf] = up
        return (gx,)

    return make_result(out, (x,), backward)


def batch_norm(
    x: Tensor,
    gamma: Tensor | None,
    beta: Tensor | None,
    running_mean: np.ndarray | None,
    running_var: np.ndarray | None,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over every axis except axis 1.

    In training mode the batch statistics are used and the running buffers are
    updated in place (unbiased variance); in eval mode the buffers are used.
    """
    axes = tuple(i for i in range(x.ndim) if i != 1)
    shape = [1] * x.ndim
    shape[1] = x.shape[1]
    shape = tuple(shape)
    n = x.data.size // x.shape[1]
    if training:
        mu = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        if running_mean is not None:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu.reshape(-1)
        if running_var is not None:
            unbiased = var.reshape(-1) * (n / max(n - 1, 1))
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased
    else:
        if running_mean is None or running_var is None:
            raise ContractError("batch_norm in eval mode needs running statistics")
        mu = running_mean.reshape(shape)
        var = running_var.reshape(shape)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    g_ = gamma.data.reshape(shape) if gamma is not None else 1.0
    out = xhat * g_ + (beta.data.reshape(shape) if beta is not None else 0.0)

    parents = [x]
    if gamma is not None:
        parents.append(gamma)
    if beta is not None:
        parents.append(beta)

    def backward(g):
        dxhat = g * g_
        if training:
            gx = (
                inv
                / n
                * (
                    n * dxhat
                    - dxhat.sum(axis=axes, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
                )
            )
        else:
            gx = dxhat * inv
        res = [gx]
        if gamma is not None:
            res.append((g * xhat).sum(axis=axes))
        if beta is not None:
            res.append(g.sum(axis=axes))
        return tuple(res)

    return make_result(out, tuple(parents), backward)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when not training or ``rate == 0``."""
    if not training or rate <= 0.0:
        return x
    if rate >= 1.0:
        raise ContractError("dropout rate must be < 1")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return make_result(x.data * keep, (x,), lambda g: (g * keep,))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` over the last axis; ``w`` is ``(out, in)``."""
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[1]:
        raise DimensionError(
            f"feature axis: input has {x.shape[-1]} features, weight expects {w.shape[1]}"
        )
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(-1, w.shape[0])
        gx = (g @ w.data) if x.requires_grad else None
        gw = g2.T @ x.data.reshape(-1, w.shape[1]) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_result(out, parents, backward)


def glu_gate(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Channel-preserving gated linear unit ``x * sigmoid(conv1x1(x))``."""
    from .tensor import mul, sigmoid

    return mul(x, sigmoid(conv2d(x, w, b, padding="valid")))


# ---------------------------------------------------------------------------
# recurrent
# ---------------------------------------------------------------------------


def gru_scan(gx: Tensor, w_hh: Tensor, b_hh: Tensor, reverse: bool = False) -> Tensor:
    """Run a GRU recurrence over precomputed input projections.

    ``gx`` is ``(B, T, 3H)`` holding ``W_ih x_t + b_ih`` with gate blocks in
    (reset, update, candidate) order. The initial state is zero. Returns the
    hidden states ``(B, T, H)`` aligned with the input frames.
    """
    B, T, H3 = gx.shape
    H = H3 // 3
    if w_hh.shape != (H3, H) or b_hh.shape != (H3,):
        raise DimensionError(
            f"hidden axis: recurrent weights {w_hh.shape}/{b_hh.shape} do not match H={H}"
        )
    W = w_hh.data
    bh = b_hh.data
    X = gx.data
    steps = range(T - 1, -1, -1) if reverse else range(T)
    hs = np.zeros((B, T, H))
    cache = []
    h = np.zeros((B, H))
    for t in steps:
        gh = h @ W.T + bh
        r = _sigmoid(X[:, t, :H] + gh[:, :H])
        z = _sigmoid(X[:, t, H : 2 * H] + gh[:, H : 2 * H])
        n = np.tanh(X[:, t, 2 * H :] + r * gh[:, 2 * H :])
        h_new = (1.0 - z) * n + z * h
        cache.append((t, h, r, z, n, gh[:, 2 * H :]))
        hs[:, t] = h_new
        h = h_new

    def backward(g):
        dX = np.zeros_like(X)
        dW = np.zeros_like(W)
        db = np.zeros_like(bh)
        dh_next = np.zeros((B, H))
        for t, h_prev, r, z, n, ghn in reversed(cache):
            dh = g[:, t] + dh_next
            dn = dh * (1.0 - z) * (1.0 - n * n)
            dz = dh * (h_prev - n) * z * (1.0 - z)
            dr = dn * ghn * r * (1.0 - r)
            dgh = np.concatenate([dr, dz, dn * r], axis=1)
            dX[:, t, :H] = dr
            dX[:, t, H : 2 * H] = dz
            dX[:, t, 2 * H :] = dn
            dW += dgh.T @ h_prev
            db += dgh.sum(axis=0)
            dh_next = dh * z + dgh @ W
        return dX, dW, db

    return make_result(hs, (gx, w_hh, b_hh), backward)


def gru_bidirectional(x: Tensor, params: dict, prefix: str) -> Tensor:
    """Bidirectional GRU layer ``(B, T, D) -> (B, T, 2H)``.

    ``params`` must hold ``{prefix}.{fwd|bwd}.{w_ih,w_hh,b_ih,b_hh}``.
    Frame ``t`` of the output concatenates the forward and backward states at ``t``.
    """
    from .tensor import concat

    outs = []
    for direction, reverse in (("fwd", False), ("bwd", True)):
        p = f"{prefix}.{direction}"
        gx = linear(x, params[f"{p}.w_ih"], params[f"{p}.b_ih"])
        outs.append(gru_scan(gx, params[f"{p}.w_hh"], params[f"{p}.b_hh"], reverse=reverse))
    return concat(outs, axis=-1)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def binary_cross_entropy(p: Tensor, target, clamp: float = 1e-7) -> Tensor:
    """Mean BCE of probabilities ``p`` against ``target``; ``p`` clamped to [clamp, 1-clamp]."""
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if t.shape != p.shape:
        raise ContractError(f"target shape {t.shape} != prediction shape {p.shape}")
    q = np.clip(p.data, clamp, 1.0 - clamp)
    n = q.size
    loss = -(t * np.log(q) + (1.0 - t) * np.log(1.0 - q)).mean()
    inside = (p.data >= clamp) & (p.data <= 1.0 - clamp)

    def backward(g):
        return (g * inside * (q - t) / (q * (1.0 - q)) / n,)

    return make_result(np.asarray(loss), (p,), backward)


def mse(a: Tensor, b) -> Tensor:
    """Mean squared error; ``b`` may be a Tensor (both get gradients) or array."""
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ContractError(f"shape {a.shape} != {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def backward(g):
        gd = g * 2.0 * diff / n
        return gd, -gd

    return make_result(np.asarray((diff * diff).mean()), (a, b), backward)
