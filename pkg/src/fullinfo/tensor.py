"""Layer kernels (forward and analytic backward) for the feature net.

Tensors are plain numpy arrays. Every op keeps the floating dtype of its
inputs, so the same code runs in float32 for training and float64 for
gradient checks.
"""

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, SegmentTooShortError

NORM_EPS = 1e-12


@dataclass
class LayerGrad:
    input_grad: np.ndarray | None
    param_grads: dict = field(default_factory=dict)


def _shape_error(what, a, b):
    return DimensionError(f"{what}: shape {tuple(a.shape)} does not conform to {tuple(b.shape)}")


# ----------------------------------------------------------------------------
# affine
# ----------------------------------------------------------------------------

def affine_forward(x, W, b):
    """``out[..., j] = sum_k W[j, k] * x[..., k] + b[j]``."""
    if W.ndim != 2 or x.shape[-1] != W.shape[1]:
        raise _shape_error("affine input vs weight", x, W)
    if b.shape != (W.shape[0],):
        raise _shape_error("affine bias vs weight", b, W)
    return x @ W.T + b


def affine_backward(x, W, upstream):
    if W.ndim != 2 or x.shape[-1] != W.shape[1]:
        raise _shape_error("affine input vs weight", x, W)
    if upstream.shape != x.shape[:-1] + (W.shape[0],):
        raise _shape_error("affine upstream vs input", upstream, x)
    x2 = x.reshape(-1, x.shape[-1])
    g2 = upstream.reshape(-1, W.shape[0])
    return LayerGrad(
        input_grad=upstream @ W,
        param_grads={"W": g2.T @ x2, "b": g2.sum(axis=0)},
    )


# ----------------------------------------------------------------------------
# relu
# ----------------------------------------------------------------------------

def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(x, upstream):
    if upstream.shape != x.shape:
        raise _shape_error("relu upstream vs input", upstream, x)
    return LayerGrad(input_grad=upstream * (x > 0))


# ----------------------------------------------------------------------------
# 2-D valid convolution (cross-correlation)
# ----------------------------------------------------------------------------

def _as_batched(x, K):
    """Lift (x, K) to ([B, C, T, F], [nf, C, kt, kf]) and report the original rank."""
    if x.ndim == 2 and K.ndim == 3:
        return x[None, None], K[:, None], 2
    if x.ndim == 3 and K.ndim == 4:
        return x[None], K, 3
    if x.ndim == 4 and K.ndim == 4:
        return x, K, 4
    raise _shape_error("conv2d input vs kernel rank", x, K)


def _restore(out, rank):
    # rank-2 and rank-3 inputs both yield [nf, T', F'] (no batch axis).
    return out[0] if rank in (2, 3) else out


def im2col(x4, kt, kf):
    """Patches of ``x4[B, C, T, F]`` as a contiguous ``[B, T', F', C * kt * kf]`` array."""
    win = sliding_window_view(x4, (kt, kf), axis=(2, 3))  # [B, C, T', F', kt, kf]
    B, C, Tp, Fp = win.shape[:4]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B, Tp, Fp, C * kt * kf)


def conv2d_forward(x, K, b, cols=None):
    """Valid 2-D cross-correlation over (time, freq).

    Accepted layouts: ``x[T, F]`` with ``K[nf, kt, kf]``; ``x[C, T, F]`` or
    ``x[B, C, T, F]`` with ``K[nf, C, kt, kf]``. Output is ``[nf, T', F']``
    (or ``[B, nf, T', F']``) with ``T' = T - kt + 1`` and ``F' = F - kf + 1``.
    A precomputed ``im2col`` of the input may be passed as ``cols``.
    """
    x4, K4, rank = _as_batched(x, K)
    _, C, T, F = x4.shape
    nf, Ck, kt, kf = K4.shape
    if C != Ck:
        raise _shape_error("conv2d input channels vs kernel", x, K)
    if kt > T or kf > F:
        raise DimensionError(f"conv2d kernel {tuple(K.shape)} larger than input {tuple(x.shape)}")
    if b.shape != (nf,):
        raise _shape_error("conv2d bias vs kernel", b, K)
    if cols is None:
        cols = im2col(x4, kt, kf)
    out = cols @ K4.reshape(nf, -1).T  # [B, T', F', nf]
    out = out.transpose(0, 3, 1, 2) + b[None, :, None, None]
    return _restore(np.ascontiguousarray(out), rank)


def conv2d_backward(x, K, upstream, need_input_grad=True, cols=None):
    x4, K4, rank = _as_batched(x, K)
    nf, C, kt, kf = K4.shape
    B, _, T, F = x4.shape
    Tp, Fp = T - kt + 1, F - kf + 1
    up4 = upstream[None] if rank in (2, 3) else upstream
    if up4.shape != (B, nf, Tp, Fp):
        raise _shape_error("conv2d upstream vs output", upstream, np.empty((B, nf, Tp, Fp)))
    if cols is None:
        cols = im2col(x4, kt, kf)
    up_last = np.ascontiguousarray(up4.transpose(0, 2, 3, 1)).reshape(-1, nf)  # [B*T'*F', nf]
    dK = up_last.T @ cols.reshape(-1, C * kt * kf)
    grads = {"K": dK.reshape(K.shape), "b": up_last.sum(axis=0)}
    dx = None
    if need_input_grad:
        # scatter patches back in channel-last layout, where each add is contiguous
        Kl = K4.transpose(0, 2, 3, 1).reshape(nf, -1)
        dcols = (up_last @ Kl).reshape(B, Tp, Fp, kt, kf, C)
        dxl = np.zeros((B, T, F, C), dtype=dcols.dtype)
        for i in range(kt):
            for j in range(kf):
                dxl[:, i:i + Tp, j:j + Fp] += dcols[:, :, :, i, j]
        dx = np.ascontiguousarray(dxl.transpose(0, 3, 1, 2)).reshape(x.shape)
    return LayerGrad(input_grad=dx, param_grads=grads)


# ----------------------------------------------------------------------------
# max pooling over the frequency axis
# ----------------------------------------------------------------------------

def _check_pool(x, pool):
    if pool < 1 or x.shape[-1] % pool:
        raise DimensionError(f"frequency extent {x.shape[-1]} is not divisible by pool {pool}")


def maxpool_freq_forward(x, pool):
    """Max over non-overlapping windows of ``pool`` bins along the last axis."""
    _check_pool(x, pool)
    out = x[..., 0::pool]
    for k in range(1, pool):
        out = np.maximum(out, x[..., k::pool])
    return np.ascontiguousarray(out)


def maxpool_freq_backward(x, pool, upstream):
    _check_pool(x, pool)
    if upstream.shape != x.shape[:-1] + (x.shape[-1] // pool,):
        raise _shape_error("maxpool upstream vs output", upstream, x[..., ::pool])
    # first maximum in each window receives the gradient
    best = x[..., 0::pool]
    arg = np.zeros(best.shape, dtype=np.int8)
    for k in range(1, pool):
        cand = x[..., k::pool]
        better = cand > best
        arg[better] = k
        best = np.where(better, cand, best)
    g = np.empty(x.shape, dtype=upstream.dtype)
    for k in range(pool):
        g[..., k::pool] = np.where(arg == k, upstream, 0)
    return LayerGrad(input_grad=g)


# ----------------------------------------------------------------------------
# time-delay layer
# ----------------------------------------------------------------------------

def tdnn_span(offsets):
    return max(offsets) - min(offsets)


def _tdnn_splice(x3, offsets):
    lo = min(offsets)
    Tp = x3.shape[1] - tdnn_span(offsets)
    return np.concatenate([x3[:, o - lo:o - lo + Tp] for o in offsets], axis=-1)


def tdnn_forward(x, offsets, W, b):
    """Affine map of frames ``t + o`` for each offset ``o``, concatenated.

    ``x`` is ``[T, din]`` or ``[B, T, din]``; output time shrinks by the
    offset span. ``W`` has shape ``[dout, len(offsets) * din]`` with the
    offset blocks in the order given.
    """
    offsets = list(offsets)
    x3 = x[None] if x.ndim == 2 else x
    if x3.ndim != 3:
        raise DimensionError(f"tdnn input must be [T, din] or [B, T, din], got {tuple(x.shape)}")
    if W.ndim != 2 or W.shape[1] != len(offsets) * x3.shape[2]:
        raise _shape_error("tdnn spliced input vs weight", x, W)
    if x3.shape[1] < tdnn_span(offsets) + 1:
        raise SegmentTooShortError(
            f"segment shorter than receptive field: {x3.shape[1]} frames, need {tdnn_span(offsets) + 1}")
    out = affine_forward(_tdnn_splice(x3, offsets), W, b)
    return out[0] if x.ndim == 2 else out


def tdnn_backward(x, offsets, W, upstream, need_input_grad=True):
    offsets = list(offsets)
    x3 = x[None] if x.ndim == 2 else x
    up3 = upstream[None] if x.ndim == 2 else upstream
    spliced = _tdnn_splice(x3, offsets)
    g = affine_backward(spliced, W, up3)
    dx = None
    if need_input_grad:
        lo = min(offsets)
        din = x3.shape[2]
        Tp = spliced.shape[1]
        dx3 = np.zeros(x3.shape, dtype=g.input_grad.dtype)
        for n, o in enumerate(offsets):
            dx3[:, o - lo:o - lo + Tp] += g.input_grad[..., n * din:(n + 1) * din]
        dx = dx3[0] if x.ndim == 2 else dx3
    return LayerGrad(input_grad=dx, param_grads=g.param_grads)


# ----------------------------------------------------------------------------
# length normalisation
# ----------------------------------------------------------------------------

def length_normalize(v, eps=NORM_EPS):
    """Scale the last axis to unit length: ``v / sqrt(|v|^2 + eps)``."""
    return v / np.sqrt(np.sum(v * v, axis=-1, keepdims=True) + eps)


def length_normalize_backward(v, upstream, eps=NORM_EPS):
    n = np.sqrt(np.sum(v * v, axis=-1, keepdims=True) + eps)
    y = v / n
    return LayerGrad(input_grad=(upstream - y * np.sum(y * upstream, axis=-1, keepdims=True)) / n)


# ----------------------------------------------------------------------------
# softmax / cross entropy
# ----------------------------------------------------------------------------

def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood of ``labels`` and its gradient w.r.t. logits."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise _shape_error("cross entropy labels vs logits", labels, logits)
    S = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= S):
        raise IndexError(f"label out of range [0, {S})")
    n = logits.shape[0]
    logp = log_softmax(logits)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1
    grad /= n
    return float(loss), grad


# ----------------------------------------------------------------------------
# optimiser
# ----------------------------------------------------------------------------

def sgd_step(params, grads, velocity, lr, momentum, frozen=()):
    """Classic momentum: ``v <- momentum * v - lr * g``; ``p <- p + v``.

    Updates ``params`` and ``velocity`` in place. Names in ``frozen`` and
    names without a gradient are left untouched.
    """
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    if not 0 <= momentum < 1:
        raise ValueError("momentum must be in [0, 1)")
    for name, g in grads.items():
        if name in frozen:
            continue
        p = params[name]
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(p)
        v *= momentum
        v -= lr * g
        p += v
    return params
