"""SGD with momentum, the step-rate schedule, and the per-arm update pipelines.

Momentum is the classical heavy-ball form -- ``v <- mu*v + g`` then
``w <- w - lr*v`` -- with no dampening and no Nesterov lookahead, and the
learning rate multiplies the velocity at application time (not folded into
the buffer).  That convention matters: it changes effective step sizes
when the rate anneals, and it matches the training lineage the resnet
configs follow.  Momentum buffers are never reset at annealing boundaries.

The normalization-free pipeline runs, per conv kernel:
backprop gradient -> add unity-magnitude anchor gradient -> remove the
weighted spatial-mean component (eligible layers only) -> momentum ->
update.  Because the anchor gradient is radial and the mean removal is
linear, a buffer fed only zero-mean gradients stays zero-mean, which is
what keeps a zero-mean-initialized model on that subspace when the removal
weight is 1.  Scales, biases, and linear weights get plain momentum
updates with no decay of any kind.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .msr import MsrConfig, czmg_transform, luma_all_filters
from .tensor import Tensor


@dataclass(frozen=True)
class LrSchedule:
    """Piecewise-constant rate: base times every multiplier whose epoch has passed."""

    base_lr: float
    milestones: tuple[tuple[int, float], ...] = ()

    def validate(self) -> "LrSchedule":
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be > 0, got {self.base_lr}")
        last = -1
        for epoch, mult in self.milestones:
            if epoch <= last:
                raise ConfigError(
                    f"lr milestones must be strictly increasing, got {self.milestones}")
            if mult <= 0:
                raise ConfigError(f"lr multiplier must be > 0, got {mult}")
            last = epoch
        return self


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    """Rate in force at a given epoch; a milestone epoch uses the annealed value."""
    if epoch < 0:
        raise ValueError(f"lr_at: epoch must be >= 0, got {epoch}")
    lr = schedule.base_lr
    for boundary, mult in schedule.milestones:
        if epoch >= boundary:
            lr *= mult
    return lr


def sgd_momentum_step(param: Tensor, grad: Tensor, buf: Tensor,
                      lr: float, momentum: float) -> None:
    """One heavy-ball update, mutating param and buf in place."""
    if param.shape != grad.shape or param.shape != buf.shape:
        raise ValueError(
            f"sgd step: shape mismatch param {param.shape}, grad {grad.shape}, "
            f"buffer {buf.shape}")
    buf *= momentum
    buf += grad
    param -= lr * buf


class SgdMomentum:
    """Momentum buffers plus step/epoch counters for one model's parameters."""

    def __init__(self, params: dict[str, Tensor], momentum: float):
        if not 0.0 <= momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {momentum}")
        self.momentum = momentum
        self.buffers = {name: np.zeros_like(p) for name, p in params.items()}
        self.step_count = 0
        self.epoch = 0

    def step(self, params: dict[str, Tensor], grads: dict[str, Tensor],
             lr: float) -> None:
        for name, g in grads.items():
            sgd_momentum_step(params[name], g, self.buffers[name], lr, self.momentum)
        self.step_count += 1


def msr_update_pipeline(model, grads: dict[str, Tensor], cfg: MsrConfig,
                        opt: SgdMomentum, lr: float,
                        czmg_after_momentum: bool = False) -> float:
    """Apply one normalization-free update; returns the anchor penalty value.

    Default ordering transforms the raw gradient before momentum
    accumulation, keeping the buffers themselves mean-free.  The ablation
    flag moves the mean removal after momentum (buffers accumulate raw
    gradients; the applied velocity is transformed instead).
    """
    penalty = 0.0
    eligible = {}
    for name, p in model.named_conv_params():
        key = name + ".v"
        gv = grads[key]
        if cfg.luma_weight > 0.0:
            loss, gl = luma_all_filters(p.v, cfg.luma_weight)
            penalty += loss
            gv = gv + gl
        if p.czm_eligible and cfg.zmg > 0.0:
            eligible[key] = True
            if not czmg_after_momentum:
                gv = czmg_transform(gv, cfg.zmg)
        grads[key] = gv

    if not czmg_after_momentum:
        opt.step(model.params(), grads, lr)
        return penalty

    params = model.params()
    for name, g in grads.items():
        buf = opt.buffers[name]
        buf *= opt.momentum
        buf += g
        upd = czmg_transform(buf, cfg.zmg) if name in eligible else buf
        params[name] -= lr * upd
    opt.step_count += 1
    return penalty


def baseline_l2_step(model, grads: dict[str, Tensor], weight_decay: float,
                     opt: SgdMomentum, lr: float) -> float:
    """Classic coupled L2 on the weight tensors, then momentum; returns penalty.

    Decay applies to conv kernels and linear weight matrices (grad plus
    2*wd*param, the gradient of wd*||w||^2); biases and batch-norm
    scale/shift are left undecayed.
    """
    penalty = 0.0
    params = model.params()
    if weight_decay > 0.0:
        for name in model.decayable_param_names():
            w = params[name]
            penalty += weight_decay * float(np.sum(w * w))
            grads[name] = grads[name] + 2.0 * weight_decay * w
    opt.step(params, grads, lr)
    return penalty


def plain_step(model, grads: dict[str, Tensor], opt: SgdMomentum, lr: float) -> float:
    """Unmodified SGD-momentum update (the no-help control arm)."""
    opt.step(model.params(), grads, lr)
    return 0.0
