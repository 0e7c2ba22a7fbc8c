"""Channel-wise zero-mean machinery and unity-magnitude anchoring.

A conv filter whose every 2-d spatial slice sums to zero annihilates any
constant per-channel offset in its input: the offset contributes
``S_c * sum_i(kernel slice)`` to each output position, which is zero.
This module owns everything that creates and preserves that condition:

* :func:`czm_project` -- remove the spatial mean of every trailing slice;
* :func:`czmi_init` -- draw uniform weights, project, then normalize each
  filter to unit Euclidean magnitude;
* :func:`czmg_transform` -- subtract a weighted spatial mean from kernel
  gradients after backprop (outside any gradient tape), so updates stay
  near the zero-mean subspace without removing useful signal entirely;
* :func:`luma_loss_and_grad` -- a quadratic penalty anchoring each
  filter's magnitude to 1 instead of decaying it to 0, applied as an
  analytic gradient term;
* diagnostics reporting how far a model has drifted from the zero-mean
  condition and how its filter magnitudes are distributed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateFilterError
from .layers import ConvFilterParams
from .tensor import Prng, Tensor

DEGENERATE_NORM = 1e-8
DEFLATED_NORM = 0.1


@dataclass
class MsrConfig:
    """Hyperparameters of the normalization-free arm.

    zmg: fraction of the spatial-mean gradient component removed each step,
        in [0, 1].  0.85 works across the resnet configs; VGG-style nets
        tolerate 0.98 or even 1.
    luma_weight: weight of the unity-magnitude anchor (reuses the classic
        5e-4 weight-decay value, so there is no new constant to search).
    init_scale: initial per-filter scale exp(g); below 1 for stable early
        training, 0.8 by default.
    noise_amplitude: amplitude a of the multiplicative U(1-a, 1+a) mask
        injected during training.
    first_layer_czm: also apply the zero-mean treatment to the input conv
        (off by default: that layer sees raw image channels, which carry a
        meaningful mean).
    """

    zmg: float = 0.85
    luma_weight: float = 5e-4
    init_scale: float = 0.8
    noise_amplitude: float = 0.1
    first_layer_czm: bool = False

    def validate(self) -> "MsrConfig":
        if not 0.0 <= self.zmg <= 1.0:
            raise ConfigError(f"zmg must be in [0, 1], got {self.zmg}")
        if self.luma_weight < 0.0:
            raise ConfigError(f"luma_weight must be >= 0, got {self.luma_weight}")
        if self.init_scale <= 0.0:
            raise ConfigError(f"init_scale must be > 0, got {self.init_scale}")
        if not 0.0 <= self.noise_amplitude < 1.0:
            raise ConfigError(
                f"noise_amplitude must be in [0, 1), got {self.noise_amplitude}")
        return self


def czm_project(t: Tensor) -> Tensor:
    """Subtract from every trailing 2-d slice its spatial mean.

    Idempotent and linear; requires at least two trailing spatial axes.
    """
    if t.ndim < 2:
        raise ValueError(f"czm_project: need rank >= 2, got shape {t.shape}")
    return t - t.mean(axis=(-2, -1), keepdims=True)


def slice_means(t: Tensor) -> Tensor:
    """Spatial mean of each trailing 2-d slice (axes kept, size 1)."""
    return t.mean(axis=(-2, -1), keepdims=True)


def czmi_init(shape, rng: Prng) -> Tensor:
    """Draw U(-1,+1), zero the spatial slice means, unit-normalize per filter.

    ``shape`` is [F, C, Kh, Kw] with spatial extent > 1x1 (pointwise and
    other 1x1 kernels have no spatial mean to remove; route them to
    :func:`unit_uniform_init` instead).
    """
    shape = tuple(shape)
    if len(shape) != 4:
        raise ValueError(f"czmi_init: need [F, C, Kh, Kw], got {shape}")
    if shape[2] * shape[3] <= 1:
        raise ValueError(
            f"czmi_init: spatial extent {shape[2]}x{shape[3]} has no mean to remove; "
            "use unit_uniform_init for pointwise kernels"
        )
    x = rng.uniform(-1.0, 1.0, shape=shape)
    xp = czm_project(x)
    norms = np.sqrt(np.sum(xp * xp, axis=(1, 2, 3), keepdims=True))
    if np.any(norms < DEGENERATE_NORM):
        raise DegenerateFilterError("czmi_init: drew a (near) zero filter")
    return xp / norms


def unit_uniform_init(shape, rng: Prng) -> Tensor:
    """U(-1,+1) normalized to unit magnitude per filter, no mean removal.

    Used for the input layer and 1x1 kernels.
    """
    shape = tuple(shape)
    if len(shape) != 4:
        raise ValueError(f"unit_uniform_init: need [F, C, Kh, Kw], got {shape}")
    x = rng.uniform(-1.0, 1.0, shape=shape)
    norms = np.sqrt(np.sum(x * x, axis=(1, 2, 3), keepdims=True))
    if np.any(norms < DEGENERATE_NORM):
        raise DegenerateFilterError("unit_uniform_init: drew a (near) zero filter")
    return x / norms


def czmg_transform(grad: Tensor, z: float) -> Tensor:
    """Remove fraction z of each slice's spatial-mean gradient component.

    New slice mean = (1 - z) * old slice mean, exactly.  Applied to raw
    kernel gradients after backprop, before momentum.
    """
    if not 0.0 <= z <= 1.0:
        raise ValueError(f"czmg_transform: z must be in [0, 1], got {z}")
    if grad.ndim < 2:
        raise ValueError(f"czmg_transform: need rank >= 2, got shape {grad.shape}")
    return grad - z * slice_means(grad)


def luma_loss_and_grad(v: Tensor, lam: float):
    """Unity-magnitude anchor for one filter: loss = (||v|| - 1)^2 * lam.

    The gradient 2*lam*(||v||-1) * v/||v|| is purely radial, so it changes
    only the filter's magnitude, never its direction -- and it is zero-mean
    whenever v is.  Raises on (near) zero filters, where the direction is
    undefined; reaching that state means the anchoring was not active.
    """
    n = float(np.sqrt(np.sum(v * v)))
    if n < DEGENERATE_NORM:
        raise DegenerateFilterError(
            f"luma: filter magnitude {n:.3e} below {DEGENERATE_NORM:.0e}")
    loss = (n - 1.0) ** 2 * lam
    grad = (2.0 * lam * (n - 1.0) / n) * v
    return loss, grad


def luma_all_filters(v: Tensor, lam: float):
    """Vectorized anchor over a [F, ...] kernel stack.

    Returns (total loss, gradient of the same shape as v).
    """
    axes = tuple(range(1, v.ndim))
    norms = np.sqrt(np.sum(v * v, axis=axes, keepdims=True))
    if np.any(norms < DEGENERATE_NORM):
        bad = np.nonzero(norms.reshape(-1) < DEGENERATE_NORM)[0]
        raise DegenerateFilterError(f"luma: degenerate filters at indices {bad.tolist()}")
    loss = float(np.sum((norms - 1.0) ** 2) * lam)
    grad = (2.0 * lam * (norms - 1.0) / norms) * v
    return loss, grad


def effective_lr(lr: float, filter_magnitude: float) -> float:
    """Step size experienced relative to filter magnitude: lr / m^2."""
    if filter_magnitude <= 0.0:
        raise ValueError(f"effective_lr: magnitude must be > 0, got {filter_magnitude}")
    return lr / filter_magnitude ** 2


def export_inference_weights(p: ConvFilterParams) -> Tensor:
    """Fold the exponentiated scale into a plain kernel tensor exp(g)*v."""
    return p.kernel()


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

@dataclass
class LayerDiagnostics:
    name: str
    czm_eligible: bool
    max_abs_slice_mean: float
    v_norms: Tensor          # per-filter direction magnitudes
    scales: Tensor           # per-filter exp(g) (ones for unscaled layers)
    w_norms: Tensor          # per-filter effective kernel magnitudes
    effective_lrs: Tensor    # lr / w_norm^2 per filter


@dataclass
class ShiftDiagnostics:
    """Per-layer zero-mean drift and filter-magnitude report."""

    lr: float
    layers: list[LayerDiagnostics] = field(default_factory=list)

    @property
    def max_abs_slice_mean(self) -> float:
        vals = [d.max_abs_slice_mean for d in self.layers if d.czm_eligible]
        return max(vals) if vals else 0.0

    def all_w_norms(self) -> Tensor:
        return np.concatenate([d.w_norms for d in self.layers]) if self.layers \
            else np.zeros(0)

    def all_v_norms(self) -> Tensor:
        return np.concatenate([d.v_norms for d in self.layers]) if self.layers \
            else np.zeros(0)

    @property
    def deflated_count(self) -> int:
        return int(np.sum(self.all_w_norms() < DEFLATED_NORM))

    @property
    def mean_effective_lr(self) -> float:
        lrs = np.concatenate([d.effective_lrs for d in self.layers]) if self.layers \
            else np.zeros(0)
        return float(lrs.mean()) if lrs.size else 0.0


def conv_diagnostics(name: str, p: ConvFilterParams, lr: float) -> LayerDiagnostics:
    # this also runs inside divergence dumps, where kernels may already have
    # overflowed; report inf rather than warn
    f = p.n_filters
    with np.errstate(over="ignore", invalid="ignore"):
        v_norms = np.sqrt(np.sum(p.v * p.v, axis=(1, 2, 3)))
        scales = np.exp(p.g) if p.g is not None else np.ones(f)
        w_norms = scales * v_norms
    eff = np.array([effective_lr(lr, m) if m > 0 else np.inf for m in w_norms])
    return LayerDiagnostics(
        name=name,
        czm_eligible=p.czm_eligible,
        max_abs_slice_mean=float(np.max(np.abs(slice_means(p.v)))),
        v_norms=v_norms,
        scales=scales,
        w_norms=w_norms,
        effective_lrs=eff,
    )


def shift_diagnostics(model, lr: float) -> ShiftDiagnostics:
    """Collect drift/magnitude diagnostics from every conv layer of a model.

    ``model`` is anything exposing ``named_conv_params()`` yielding
    (name, ConvFilterParams) pairs, e.g. :class:`msrkit.models.Model`.
    """
    report = ShiftDiagnostics(lr=lr)
    for name, p in model.named_conv_params():
        report.layers.append(conv_diagnostics(name, p, lr))
    return report
