"""Forward and backward passes for every layer the training harness uses.

All functions are pure: forward passes return ``(output, cache)`` where the
cache is exactly what the matching backward pass needs, and nothing here
keeps hidden state (the one documented exception: batch-norm running
statistics are committed into its parameter struct during train-mode
forward, which is the universal convention for that layer).

Convolution is cross-correlation -- no kernel flip -- which is the usual
deep-learning convention.  Spatial filters may carry a per-filter log-scale
``g`` so the effective kernel is ``exp(g) * v``; keeping the direction
tensor ``v`` separate from a strictly-positive scale is what lets the
zero-mean machinery in :mod:`msrkit.msr` operate on direction alone.

Summation order inside a layer is fixed (plain numpy reductions over
contiguous buffers), so results are reproducible run to run.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Prng, Tensor


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

@dataclass
class ConvFilterParams:
    """Parameters of one conv layer.

    ``v`` has shape [F, C, Kh, Kw].  ``g`` (length F) is the log of the
    per-filter scale, so the kernel applied to the input is
    ``exp(g[f]) * v[f]``; ``g=None`` means a plain unscaled kernel (the
    baseline arms).  ``czm_eligible`` marks filters that the zero-mean
    initializer/gradient transform may touch: spatial extent > 1x1 and not
    the network's input layer.
    """

    v: Tensor
    g: Tensor | None = None
    b: Tensor | None = None
    czm_eligible: bool = False
    stride: int = 1
    padding: int = 0

    @property
    def n_filters(self) -> int:
        return self.v.shape[0]

    def kernel(self) -> Tensor:
        """Effective kernel exp(g)*v (a fresh array; params untouched)."""
        if self.g is None:
            return self.v.copy()
        return np.exp(self.g)[:, None, None, None] * self.v


def _conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    # floor convention: trailing rows that don't fill a window are dropped.
    # Strided 3x3 resnet downsampling (32 -> 16 at stride 2, pad 1) exists
    # only under this convention, so it is the one implemented; the error
    # fires when no window fits at all.
    span = size + 2 * pad - k
    if span < 0:
        raise ValueError(
            f"conv2d: kernel {k} with padding {pad} does not fit input {size}"
        )
    return span // stride + 1


def _im2col(x: Tensor, kh: int, kw: int, stride: int, pad: int):
    """Patches of x as [N, Ho*Wo, C*Kh*Kw] (copy, float64)."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols), ho, wo


def _col2im(dcols: Tensor, x_shape, kh: int, kw: int, stride: int, pad: int) -> Tensor:
    """Scatter-add column gradients back onto the (unpadded) input."""
    n, c, h, w = x_shape
    ho = _conv_out_size(h, kh, stride, pad)
    wo = _conv_out_size(w, kw, stride, pad)
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    d = dcols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + ho * stride:stride, j:j + wo * stride:stride] += d[..., i, j]
    if pad:
        return dxp[:, :, pad:-pad, pad:-pad]
    return dxp


def conv2d_forward(x: Tensor, p: ConvFilterParams):
    """Cross-correlate x [N,C,H,W] with exp(g)*v, plus per-filter bias.

    Returns (y [N,F,Ho,Wo], cache).  Zero padding; output size must come
    out integral or this raises.
    """
    if x.ndim != 4 or p.v.ndim != 4:
        raise ValueError(f"conv2d: need 4-d input/kernel, got {x.shape} / {p.v.shape}")
    f, c, kh, kw = p.v.shape
    if x.shape[1] != c:
        raise ValueError(f"conv2d: input has {x.shape[1]} channels, kernel expects {c}")
    _conv_out_size(x.shape[2], kh, p.stride, p.padding)
    _conv_out_size(x.shape[3], kw, p.stride, p.padding)
    cols, ho, wo = _im2col(x, kh, kw, p.stride, p.padding)
    w = p.kernel().reshape(f, -1)
    y = cols @ w.T
    if p.b is not None:
        y = y + p.b
    y = y.transpose(0, 2, 1).reshape(x.shape[0], f, ho, wo)
    return y, x


def conv2d_backward(x: Tensor, p: ConvFilterParams, dldy: Tensor):
    """Gradients of a scalar loss through conv2d_forward.

    Returns (dldx, dldv, dldg, dldb); dldg/dldb are None when the layer has
    no scale / bias.  With kernel W = exp(g)*v the chain rule gives
    dldv = exp(g) * dldW and dldg[f] = <dldW[f], W[f]> (the raw kernel
    gradient dotted with the effective kernel, per filter).  Patches are
    recomputed here rather than cached by the forward pass: one extra
    im2col is far cheaper than holding every layer's column matrix alive.
    """
    f, c, kh, kw = p.v.shape
    ho = _conv_out_size(x.shape[2], kh, p.stride, p.padding)
    wo = _conv_out_size(x.shape[3], kw, p.stride, p.padding)
    if dldy.shape != (x.shape[0], f, ho, wo):
        raise ValueError(
            f"conv2d backward: gradient shape {dldy.shape} does not match "
            f"forward output {(x.shape[0], f, ho, wo)}"
        )
    cols, _, _ = _im2col(x, kh, kw, p.stride, p.padding)
    dy = dldy.reshape(x.shape[0], f, ho * wo).transpose(0, 2, 1)   # [N, L, F]

    dldw = np.einsum("nlf,nlk->fk", dy, cols).reshape(f, c, kh, kw)
    if p.g is None:
        dldv = dldw
        dldg = None
    else:
        scale_f = np.exp(p.g)
        dldv = scale_f[:, None, None, None] * dldw
        dldg = np.einsum("fchw,fchw->f", dldw, p.kernel())
    dldb = dy.sum(axis=(0, 1)) if p.b is not None else None

    w = p.kernel().reshape(f, -1)
    dcols = dy @ w                                                 # [N, L, C*Kh*Kw]
    dldx = _col2im(dcols, x.shape, kh, kw, p.stride, p.padding)
    return dldx, dldv, dldg, dldb


# ---------------------------------------------------------------------------
# pointwise / head layers
# ---------------------------------------------------------------------------

def relu_forward(x: Tensor):
    return np.maximum(x, 0.0), x


def relu_backward(dldy: Tensor, cache: Tensor) -> Tensor:
    x = cache
    if dldy.shape != x.shape:
        raise ValueError(f"relu backward: shape mismatch {dldy.shape} vs {x.shape}")
    return dldy * (x > 0)


@dataclass
class LinearParams:
    w: Tensor                 # [K, D]
    b: Tensor | None = None   # [K]


def linear_forward(x: Tensor, p: LinearParams):
    """y = x @ w.T + b for x of shape [N, D]."""
    if x.ndim != 2 or x.shape[1] != p.w.shape[1]:
        raise ValueError(f"linear: input {x.shape} incompatible with weight {p.w.shape}")
    y = x @ p.w.T
    if p.b is not None:
        y = y + p.b
    return y, x


def linear_backward(dldy: Tensor, cache: Tensor, p: LinearParams):
    x = cache
    if dldy.shape != (x.shape[0], p.w.shape[0]):
        raise ValueError(f"linear backward: gradient shape {dldy.shape} unexpected")
    dldw = dldy.T @ x
    dldb = dldy.sum(axis=0) if p.b is not None else None
    dldx = dldy @ p.w
    return dldx, dldw, dldb


def gap_forward(x: Tensor):
    """Global average pool [N,C,H,W] -> [N,C]."""
    if x.ndim != 4:
        raise ValueError(f"gap: need 4-d input, got {x.shape}")
    return x.mean(axis=(2, 3)), x.shape


def gap_backward(dldy: Tensor, cache) -> Tensor:
    n, c, h, w = cache
    if dldy.shape != (n, c):
        raise ValueError(f"gap backward: gradient shape {dldy.shape} vs ({n}, {c})")
    return np.broadcast_to(dldy[:, :, None, None], (n, c, h, w)) / (h * w)


def softmax_xent(logits: Tensor, labels: np.ndarray):
    """Mean cross-entropy over the batch and its gradient wrt logits.

    Gradient is (softmax - onehot) / N.  Labels must lie in [0, K).
    """
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ValueError(f"softmax_xent: labels shape {labels.shape} vs batch {n}")
    if labels.min() < 0 or labels.max() >= k:
        bad = labels[(labels < 0) | (labels >= k)][0]
        raise ValueError(f"softmax_xent: label {bad} outside [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=1))
    loss = float(np.mean(lse - shifted[np.arange(n), labels]))
    soft = np.exp(shifted) / np.sum(np.exp(shifted), axis=1, keepdims=True)
    soft[np.arange(n), labels] -= 1.0
    return loss, soft / n


# ---------------------------------------------------------------------------
# multiplicative noise injection
# ---------------------------------------------------------------------------

def noise_forward(x: Tensor, amplitude: float, train: bool,
                  rng: Prng | None = None, per_channel: bool = False):
    """Multiply x by a fresh uniform mask u ~ U(1-a, 1+a) during training.

    The mask has unit mean, so the layer preserves expectation; eval mode
    (or amplitude 0) passes x through bitwise.  Returns (y, mask); the
    mask is what backward multiplies by.  Amplitude must sit in [0, 1):
    anything >= 1 would let the modulation flip signs.
    """
    a = float(amplitude)
    if not 0.0 <= a < 1.0:
        raise ValueError(f"noise: amplitude must be in [0, 1), got {a}")
    if not train or a == 0.0:
        return x, None
    if rng is None:
        raise ValueError("noise: train-mode forward with amplitude > 0 needs an rng")
    shape = (x.shape[0], x.shape[1]) + (1,) * (x.ndim - 2) if per_channel else x.shape
    mask = rng.uniform(1.0 - a, 1.0 + a, shape=shape)
    return x * mask, mask


def noise_backward(dldy: Tensor, mask: Tensor | None) -> Tensor:
    return dldy if mask is None else dldy * mask


# ---------------------------------------------------------------------------
# batch normalization (comparison baseline only)
# ---------------------------------------------------------------------------

BN_EPS = 1e-5


@dataclass
class BatchNormParams:
    """Per-channel affine batch norm with running statistics for eval.

    Running stats follow r <- (1-momentum)*r + momentum*batch_stat with the
    biased batch variance (documented choice); eps is fixed at 1e-5.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: Tensor = field(default=None)  # type: ignore[assignment]
    running_var: Tensor = field(default=None)   # type: ignore[assignment]
    momentum: float = 0.1

    def __post_init__(self):
        c = self.gamma.shape[0]
        if self.running_mean is None:
            self.running_mean = np.zeros(c)
        if self.running_var is None:
            self.running_var = np.ones(c)


def batchnorm_forward(x: Tensor, p: BatchNormParams, train: bool):
    """Normalize per channel over (batch, spatial), then scale/shift.

    Train mode uses minibatch statistics and updates the running buffers
    in place; eval mode uses the running buffers.  A train-mode batch of
    size 1 is rejected (the variance estimate is degenerate).
    """
    if x.ndim != 4 or x.shape[1] != p.gamma.shape[0]:
        raise ValueError(f"batchnorm: input {x.shape} vs channels {p.gamma.shape[0]}")
    if train:
        if x.shape[0] == 1:
            raise ValueError("batchnorm: train mode needs batch size > 1")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        p.running_mean += p.momentum * (mean - p.running_mean)
        p.running_var += p.momentum * (var - p.running_var)
    else:
        mean = p.running_mean
        var = p.running_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    y = p.gamma[None, :, None, None] * xhat + p.beta[None, :, None, None]
    cache = (xhat, inv_std, train)
    return y, cache


def batchnorm_backward(dldy: Tensor, cache, p: BatchNormParams):
    """Returns (dldx, dldgamma, dldbeta)."""
    xhat, inv_std, train = cache
    if dldy.shape != xhat.shape:
        raise ValueError(f"batchnorm backward: shape mismatch {dldy.shape} vs {xhat.shape}")
    dgamma = np.einsum("nchw,nchw->c", dldy, xhat)
    dbeta = dldy.sum(axis=(0, 2, 3))
    dxhat = dldy * p.gamma[None, :, None, None]
    if not train:
        return dxhat * inv_std[None, :, None, None], dgamma, dbeta
    m = dldy.shape[0] * dldy.shape[2] * dldy.shape[3]
    sum_dxhat = dxhat.sum(axis=(0, 2, 3))
    sum_dxhat_xhat = np.einsum("nchw,nchw->c", dxhat, xhat)
    dldx = (inv_std[None, :, None, None] / m) * (
        m * dxhat
        - sum_dxhat[None, :, None, None]
        - xhat * sum_dxhat_xhat[None, :, None, None]
    )
    return dldx, dgamma, dbeta


# ---------------------------------------------------------------------------
# residual block
# ---------------------------------------------------------------------------

@dataclass
class ResidualBlockParams:
    """Basic two-conv residual block: y = shortcut(x) + branch(noise(x)).

    The noise layer sits at the branch input.  When the block changes
    resolution or channel count, the shortcut is a zero-padded subsampled
    identity (stride-slice then pad new channels evenly front/back), so the
    block itself adds no trainable shortcut weights.  Baseline arms carry
    batch-norm params after each conv; the normalization-free arms leave
    them None.  The surrounding model applies the post-add relu.
    """

    conv1: ConvFilterParams
    conv2: ConvFilterParams
    bn1: BatchNormParams | None = None
    bn2: BatchNormParams | None = None
    noise_amplitude: float = 0.0
    noise_per_channel: bool = False

    @property
    def in_channels(self) -> int:
        return self.conv1.v.shape[1]

    @property
    def out_channels(self) -> int:
        return self.conv2.v.shape[0]


def shortcut_forward(x: Tensor, stride: int, out_channels: int) -> Tensor:
    """Identity, or subsample-and-zero-pad when shape changes."""
    c_in = x.shape[1]
    if stride == 1 and out_channels == c_in:
        return x
    if out_channels < c_in:
        raise ValueError(
            f"residual shortcut: cannot map {c_in} channels onto {out_channels} "
            "without a projection"
        )
    sub = x[:, :, ::stride, ::stride]
    lo = (out_channels - c_in) // 2
    hi = out_channels - c_in - lo
    return np.pad(sub, ((0, 0), (lo, hi), (0, 0), (0, 0)))


def shortcut_backward(dldy: Tensor, x_shape, stride: int) -> Tensor:
    n, c_in, h, w = x_shape
    c_out = dldy.shape[1]
    if stride == 1 and c_out == c_in:
        return dldy
    lo = (c_out - c_in) // 2
    dldx = np.zeros(x_shape)
    dldx[:, :, ::stride, ::stride] = dldy[:, lo:lo + c_in]
    return dldx


def residual_block_forward(x: Tensor, blk: ResidualBlockParams, train: bool,
                           rng: Prng | None = None):
    h0, mask = noise_forward(x, blk.noise_amplitude, train, rng,
                             per_channel=blk.noise_per_channel)
    z1, c1 = conv2d_forward(h0, blk.conv1)
    if blk.bn1 is not None:
        t1, cb1 = batchnorm_forward(z1, blk.bn1, train)
    else:
        t1, cb1 = z1, None
    r1, cr = relu_forward(t1)
    z2, c2 = conv2d_forward(r1, blk.conv2)
    if blk.bn2 is not None:
        t2, cb2 = batchnorm_forward(z2, blk.bn2, train)
    else:
        t2, cb2 = z2, None
    y = shortcut_forward(x, blk.conv1.stride, blk.out_channels) + t2
    cache = (x.shape, mask, c1, cb1, cr, c2, cb2)
    return y, cache


def residual_block_backward(dldy: Tensor, cache, blk: ResidualBlockParams):
    """Returns (dldx, grads) with grads keyed conv1.v, conv1.g, ... bn2.beta."""
    x_shape, mask, c1, cb1, cr, c2, cb2 = cache
    grads: dict[str, Tensor] = {}

    d = dldy
    if blk.bn2 is not None:
        d, grads["bn2.gamma"], grads["bn2.beta"] = batchnorm_backward(d, cb2, blk.bn2)
    d, grads["conv2.v"], dg, db = conv2d_backward(c2, blk.conv2, d)
    if dg is not None:
        grads["conv2.g"] = dg
    if db is not None:
        grads["conv2.b"] = db
    d = relu_backward(d, cr)
    if blk.bn1 is not None:
        d, grads["bn1.gamma"], grads["bn1.beta"] = batchnorm_backward(d, cb1, blk.bn1)
    d, grads["conv1.v"], dg, db = conv2d_backward(c1, blk.conv1, d)
    if dg is not None:
        grads["conv1.g"] = dg
    if db is not None:
        grads["conv1.b"] = db
    d = noise_backward(d, mask)

    dldx = d + shortcut_backward(dldy, x_shape, blk.conv1.stride)
    return dldx, grads
