"""Differentiable operations used by the network.

Each function takes :class:`~lesionseg.tensor.Tensor` inputs, computes the
forward result with numpy and records a backward closure. Convolutions are
cross-correlations (no kernel flip). 3x3x3 convolution builds its im2col
matrix in small depth chunks and rebuilds it during backward instead of
storing it.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, make_result

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
DICE_SMOOTH = 1e-5


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ValueError(msg)


def _same_dtype(*tensors: Tensor) -> None:
    dtypes = {t.dtype for t in tensors if t is not None}
    _require(len(dtypes) == 1, f"dtype mismatch: {sorted(str(d) for d in dtypes)}")


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


# bytes per im2col chunk; small enough to stay cache resident
_COL_CHUNK_BYTES = 1 << 22


def _z_chunks(n_rows: int, row_bytes: int):
    step = max(1, _COL_CHUNK_BYTES // max(row_bytes, 1))
    for z0 in range(0, n_rows, step):
        yield z0, min(z0 + step, n_rows)


def _im2col(xp: np.ndarray, k: int, s: int, z0: int, z1: int, ho: int, wo: int, buf: np.ndarray) -> np.ndarray:
    # xp: (C, Dp, Hp, Wp) padded; output rows z0..z1 -> (C*k^3, nz*ho*wo), rows ordered (c, dz, dy, dx)
    c = xp.shape[0]
    nz = z1 - z0
    col = buf[: c * k**3 * nz * ho * wo].reshape(c, k, k, k, nz, ho, wo)
    for dz in range(k):
        for dy in range(k):
            for dx in range(k):
                col[:, dz, dy, dx] = xp[:, dz + s * z0 : dz + s * z1 : s, dy : dy + s * ho : s, dx : dx + s * wo : s]
    return col.reshape(c * k**3, nz * ho * wo)


def _col2im(col: np.ndarray, xp_grad: np.ndarray, k: int, s: int, z0: int, z1: int, ho: int, wo: int) -> None:
    c = xp_grad.shape[0]
    col = col.reshape(c, k, k, k, z1 - z0, ho, wo)
    for dz in range(k):
        for dy in range(k):
            for dx in range(k):
                xp_grad[:, dz + s * z0 : dz + s * z1 : s, dy : dy + s * ho : s, dx : dx + s * wo : s] += col[:, dz, dy, dx]


def _conv3x3_forward(xp: np.ndarray, wmat: np.ndarray, stride: int, out: tuple[int, int, int]):
    """Chunked im2col + matmul over padded input ``xp`` -> ``(B, Cout, N)``."""
    b_, cin = xp.shape[:2]
    cout = wmat.shape[0]
    plane = out[1] * out[2]
    chunks = list(_z_chunks(out[0], cin * 27 * plane * xp.dtype.itemsize))
    buf = np.empty(cin * 27 * plane * max(z1 - z0 for z0, z1 in chunks), dtype=xp.dtype)
    y = np.empty((b_, cout, out[0] * plane), dtype=xp.dtype)
    for i in range(b_):
        for z0, z1 in chunks:
            col = _im2col(xp[i], 3, stride, z0, z1, out[1], out[2], buf)
            np.matmul(wmat, col, out=y[i, :, z0 * plane : z1 * plane])
    return y, chunks, buf


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int | None = None) -> Tensor:
    """3D cross-correlation with a cubic kernel of size 1 or 3.

    Args:
        x: input ``[B, Cin, D, H, W]``.
        weight: kernel ``[Cout, Cin, k, k, k]``.
        bias: optional ``[Cout]``.
        stride: 1 or 2.
        padding: must equal ``(k - 1) // 2``; inferred when omitted.
    """
    _require(x.ndim == 5 and weight.ndim == 5, "conv3d expects 5-D input and weight")
    cout, cin, k = weight.shape[0], weight.shape[1], weight.shape[2]
    _require(weight.shape[2:] == (k, k, k), f"kernel must be cubic, got {weight.shape[2:]}")
    _require(k in (1, 3), f"kernel size must be 1 or 3, got {k}")
    _require(stride in (1, 2), f"stride must be 1 or 2, got {stride}")
    if padding is None:
        padding = (k - 1) // 2
    _require(padding == (k - 1) // 2, f"padding must be {(k - 1) // 2} for k={k}")
    _require(x.shape[1] == cin, f"input has {x.shape[1]} channels, weight expects {cin}")
    if bias is not None:
        _require(bias.shape == (cout,), f"bias shape {bias.shape} != ({cout},)")
    _same_dtype(x, weight, bias)

    b_, _, d, h, w = x.shape
    out = tuple(conv_output_size(n, k, stride, padding) for n in (d, h, w))
    _require(min(out) >= 1, f"input {x.shape[2:]} too small for conv")
    wmat = weight.data.reshape(cout, cin * k**3)
    n_out = out[0] * out[1] * out[2]

    if k == 1:
        xs = x.data[:, :, ::stride, ::stride, ::stride] if stride > 1 else x.data
        xs = xs.reshape(b_, cin, n_out)
        y = np.matmul(wmat, xs)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding,) * 2, (padding,) * 2, (padding,) * 2))
        y, chunks, buf = _conv3x3_forward(xp, wmat, stride, out)
    if bias is not None:
        y += bias.data[None, :, None]
    y = y.reshape(b_, cout, *out)

    def backward(g: np.ndarray):
        g2 = g.reshape(b_, cout, n_out)
        gb = g2.sum(axis=(0, 2)) if bias is not None else None
        if k == 1:
            gw = np.einsum("bon,bcn->oc", g2, xs, optimize=True).reshape(weight.shape)
            gx = None
            if x.requires_grad:
                gxs = np.matmul(wmat.T, g2).reshape(b_, cin, *out)
                if stride == 1:
                    gx = gxs
                else:
                    gx = np.zeros_like(x.data)
                    gx[:, :, ::stride, ::stride, ::stride] = gxs
            return gx, gw, gb
        plane = out[1] * out[2]
        gw = np.zeros_like(wmat)
        for i in range(b_):
            for z0, z1 in chunks:
                col = _im2col(xp[i], k, stride, z0, z1, out[1], out[2], buf)
                gw += g2[i, :, z0 * plane : z1 * plane] @ col.T
        gx = None
        if x.requires_grad:
            if stride == 1:
                # input grad of a stride-1 conv is a conv of g with the flipped, transposed kernel
                wflip = np.ascontiguousarray(weight.data[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
                gp = np.pad(g, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
                gx, _, _ = _conv3x3_forward(gp, wflip.reshape(cin, cout * 27), 1, (d, h, w))
                gx = gx.reshape(x.shape)
            else:
                gxp = np.zeros_like(xp)
                for i in range(b_):
                    for z0, z1 in chunks:
                        gi = g2[i, :, z0 * plane : z1 * plane]
                        _col2im(wmat.T @ gi, gxp[i], k, stride, z0, z1, out[1], out[2])
                p = padding
                gx = np.ascontiguousarray(gxp[:, :, p : p + d, p : p + h, p : p + w])
        return gx, gw.reshape(weight.shape), gb

    inputs = (x, weight) + ((bias,) if bias is not None else ())
    return make_result(y, "conv3d", inputs, backward)


def transposed_conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 2) -> Tensor:
    """2x2x2 transposed convolution with stride 2 (non-overlapping tiles).

    ``weight`` has layout ``[Cin, Cout, 2, 2, 2]``; output extents double.
    """
    _require(stride == 2, "transposed_conv3d supports stride 2 only")
    _require(x.ndim == 5 and weight.ndim == 5, "transposed_conv3d expects 5-D input and weight")
    cin, cout = weight.shape[:2]
    _require(weight.shape[2:] == (2, 2, 2), f"kernel must be 2x2x2, got {weight.shape[2:]}")
    _require(x.shape[1] == cin, f"input has {x.shape[1]} channels, weight expects {cin}")
    if bias is not None:
        _require(bias.shape == (cout,), f"bias shape {bias.shape} != ({cout},)")
    _same_dtype(x, weight, bias)

    b_, _, d, h, w = x.shape
    n = d * h * w
    wmat = weight.data.reshape(cin, cout * 8)
    xf = x.data.reshape(b_, cin, n)
    z = np.matmul(wmat.T, xf)  # (B, Cout*8, N)
    y = z.reshape(b_, cout, 2, 2, 2, d, h, w).transpose(0, 1, 5, 2, 6, 3, 7, 4)
    y = y.reshape(b_, cout, 2 * d, 2 * h, 2 * w)
    if bias is not None:
        y += bias.data[None, :, None, None, None]

    def backward(g: np.ndarray):
        gr = g.reshape(b_, cout, d, 2, h, 2, w, 2).transpose(0, 1, 3, 5, 7, 2, 4, 6).reshape(b_, cout * 8, n)
        gx = np.matmul(wmat, gr).reshape(x.shape) if x.requires_grad else None
        gw = np.einsum("bcn,bkn->ck", xf, gr, optimize=True).reshape(weight.shape)
        gb = g.sum(axis=(0, 2, 3, 4)) if bias is not None else None
        return gx, gw, gb

    inputs = (x, weight) + ((bias,) if bias is not None else ())
    return make_result(np.ascontiguousarray(y), "transposed_conv3d", inputs, backward)


def batchnorm3d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor | None,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel batch normalization over ``(B, D, H, W)``.

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place (unbiased variance, as in PyTorch).
    ``beta=None`` gives a scale-only affine transform.
    """
    _require(x.ndim == 5, "batchnorm3d expects 5-D input")
    c = x.shape[1]
    _require(gamma.shape == (c,) and (beta is None or beta.shape == (c,)), f"gamma/beta must have shape ({c},)")
    _require(running_mean.shape == (c,) and running_var.shape == (c,), "running stats shape mismatch")
    _same_dtype(x, gamma, *([beta] if beta is not None else []))
    axes = (0, 2, 3, 4)
    bshape = (1, c, 1, 1, 1)
    m = x.data.size // c

    if training:
        mean = x.data.mean(axis=axes)
        xc = x.data - mean.reshape(bshape)
        var = np.mean(np.square(xc), axis=axes)
        invstd = 1.0 / np.sqrt(var + eps)
        xhat = xc
        xhat *= invstd.reshape(bshape)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        invstd = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype)
        xhat = (x.data - running_mean.astype(x.dtype).reshape(bshape)) * invstd.reshape(bshape)
    y = xhat * gamma.data.reshape(bshape)
    if beta is not None:
        y += beta.data.reshape(bshape)

    def backward(g: np.ndarray):
        ggamma = np.einsum("bcdhw,bcdhw->c", g, xhat, optimize=True)
        gbeta = g.sum(axis=axes)
        gx = None
        if x.requires_grad:
            scale = (gamma.data * invstd).reshape(bshape)
            if training:
                gx = g - (gbeta / m).reshape(bshape) - xhat * (ggamma / m).reshape(bshape)
                gx *= scale
            else:
                gx = g * scale
        if beta is None:
            return gx, ggamma
        return gx, ggamma, gbeta

    inputs = (x, gamma) if beta is None else (x, gamma, beta)
    return make_result(y, "batchnorm3d", inputs, backward)


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0)

    def backward(g: np.ndarray):
        return (g * (x.data > 0),)

    return make_result(y, "relu", (x,), backward)


def avgpool3d(x: Tensor, kernel: int = 2, stride: int = 2) -> Tensor:
    """Mean over non-overlapping 2x2x2 windows."""
    _require(kernel == 2 and stride == 2, "avgpool3d supports kernel 2, stride 2 only")
    _require(x.ndim == 5, "avgpool3d expects 5-D input")
    b_, c, d, h, w = x.shape
    _require(d % 2 == 0 and h % 2 == 0 and w % 2 == 0, f"avgpool3d needs even extents, got {(d, h, w)}")
    y = x.data.reshape(b_, c, d // 2, 2, h // 2, 2, w // 2, 2).mean(axis=(3, 5, 7))

    def backward(g: np.ndarray):
        g8 = (g * 0.125)[:, :, :, None, :, None, :, None]
        gx = np.broadcast_to(g8, (b_, c, d // 2, 2, h // 2, 2, w // 2, 2)).reshape(x.shape)
        return (np.ascontiguousarray(gx),)

    return make_result(y, "avgpool3d", (x,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    _require(a.shape == b.shape, f"add shape mismatch {a.shape} vs {b.shape}")
    _same_dtype(a, b)

    def backward(g: np.ndarray):
        return g, g

    return make_result(a.data + b.data, "add", (a, b), backward)


def scale(a: Tensor, factor: float) -> Tensor:
    def backward(g: np.ndarray):
        return (g * factor,)

    return make_result(a.data * a.dtype.type(factor), "scale", (a,), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _require(a.ndim == b.ndim and a.ndim >= 2, "concat_channels expects tensors of equal rank")
    _require(
        a.shape[0] == b.shape[0] and a.shape[2:] == b.shape[2:],
        f"concat shape mismatch {a.shape} vs {b.shape}",
    )
    _same_dtype(a, b)
    ca = a.shape[1]

    def backward(g: np.ndarray):
        return np.ascontiguousarray(g[:, :ca]), np.ascontiguousarray(g[:, ca:])

    return make_result(np.concatenate([a.data, b.data], axis=1), "concat_channels", (a, b), backward)


def softmax_channels(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    e /= e.sum(axis=1, keepdims=True)
    return e


def _one_hot(target: np.ndarray, num_classes: int, dtype) -> np.ndarray:
    oh = np.zeros((target.shape[0], num_classes) + target.shape[1:], dtype=dtype)
    np.put_along_axis(oh, target[:, None].astype(np.intp), 1, axis=1)
    return oh


def _check_target(logits: Tensor, target: np.ndarray) -> np.ndarray:
    target = np.asarray(target)
    _require(logits.ndim == 5, "logits must be [B, C, D, H, W]")
    _require(
        target.shape == (logits.shape[0],) + logits.shape[2:],
        f"target shape {target.shape} does not match logits {logits.shape}",
    )
    c = logits.shape[1]
    if target.size and (target.min() < 0 or target.max() >= c):
        raise ValueError(f"target class ids must lie in [0, {c}), got range [{target.min()}, {target.max()}]")
    return target


def dice_ce_terms(logits: np.ndarray, target: np.ndarray, smooth: float = DICE_SMOOTH):
    """Forward pieces of the compound loss: ``(dice_loss, ce, cache)``.

    Dice is computed per foreground class over the whole batch and averaged;
    cross-entropy is the voxel mean of ``-log p[target]``.
    """
    c = logits.shape[1]
    zmax = logits.max(axis=1, keepdims=True)
    shifted = logits - zmax
    e = np.exp(shifted)
    s = e.sum(axis=1, keepdims=True)
    p = e / s
    logp_t = np.take_along_axis(shifted, target[:, None].astype(np.intp), axis=1) - np.log(s)
    ce = -float(logp_t.mean())
    onehot = _one_hot(target, c, logits.dtype)
    if c > 1:
        axes = (0, 2, 3, 4)
        inter = (p * onehot).sum(axis=axes)[1:]
        denom = p.sum(axis=axes)[1:] + onehot.sum(axis=axes)[1:] + smooth
        dice = (2 * inter + smooth) / denom
        dice_loss = float(np.mean(1.0 - dice))
    else:
        inter = denom = dice = None
        dice_loss = 0.0
    return dice_loss, ce, (p, onehot, inter, denom)


def dice_ce_loss(
    logits: Tensor,
    target: np.ndarray,
    weights: tuple[float, float] = (1.0, 1.0),
    smooth: float = DICE_SMOOTH,
) -> Tensor:
    """``w_dice * soft-Dice loss + w_ce * cross-entropy`` as a scalar tensor.

    Args:
        logits: ``[B, C, D, H, W]`` with C including background.
        target: integer class ids ``[B, D, H, W]`` in ``[0, C)``.
    """
    target = _check_target(logits, target)
    wd, wc = weights
    z = logits.data
    c = z.shape[1]
    dice_loss, ce, (p, onehot, inter, denom) = dice_ce_terms(z, target, smooth)
    loss = np.asarray(wd * dice_loss + wc * ce, dtype=z.dtype)
    n_vox = target.size

    def backward(g: np.ndarray):
        gl = float(np.asarray(g).reshape(-1)[0])
        gz = (wc * gl / n_vox) * (p - onehot)
        if c > 1 and wd:
            nfg = c - 1
            # d(1 - dice_c)/dp_c = -(2 g_c S_c - (2 I_c + s)) / S_c^2
            coef = (-wd * gl / nfg) / denom
            gp = np.zeros_like(p)
            gp[:, 1:] = (2.0 * coef).reshape(1, nfg, 1, 1, 1) * onehot[:, 1:]
            gp[:, 1:] -= (coef * (2 * inter + smooth) / denom).reshape(1, nfg, 1, 1, 1)
            gz += p * (gp - (p * gp).sum(axis=1, keepdims=True))
        return (gz.astype(z.dtype, copy=False),)

    return make_result(loss, "dice_ce_loss", (logits,), backward)
