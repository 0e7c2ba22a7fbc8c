"""Model assembly: named architectures built for one of three method arms.

Arms:

* ``msr`` — the normalization-free configuration: every conv kernel is
  reparameterized as exp(g)*v with per-filter log-scale g (init
  ln(init_scale)), spatial non-first kernels are zero-spatial-mean
  initialized, conv biases are omitted, and multiplicative noise layers
  are inserted (at residual-branch inputs for resnets; before each
  non-first conv for the plain stacks, a documented choice with no claim
  of optimality).
* ``batchnorm-baseline`` — conv + batch-norm + relu with He-normal init;
  the BN shift plays the bias role, so convs carry none.
* ``plain`` — the no-help control: same topology, He-normal init, conv
  biases, no scale/no normalization/no gradient transform.

Architecture names: ``tinycnn`` (3 convs, for small synthetic images),
``vggsmall`` (6-conv stride-2 stack for 32x32), ``resnet-mini-N`` /
``resnet110`` (He-style CIFAR resnets, depth N = 6n+2, option-A zero-pad
shortcuts); ``resnet-mini`` is shorthand for ``resnet-mini-8``.

Parameter/buffer dictionaries hand out live array references so the
optimizer and checkpointing mutate model state in place; key names are
``<layer>.<field>`` (``stage2.block3.conv1.v``, ``fc.w``, ...), with
insertion order fixed by build order.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .layers import (
    BatchNormParams,
    ConvFilterParams,
    LinearParams,
    ResidualBlockParams,
    batchnorm_backward,
    batchnorm_forward,
    conv2d_backward,
    conv2d_forward,
    gap_backward,
    gap_forward,
    linear_backward,
    linear_forward,
    noise_backward,
    noise_forward,
    relu_backward,
    relu_forward,
    residual_block_backward,
    residual_block_forward,
    softmax_xent,
)
from .msr import MsrConfig, czmi_init, unit_uniform_init
from .tensor import Prng, Tensor

ARMS = ("msr", "batchnorm-baseline", "plain")
NOISE_POSITIONS = ("auto", "hidden", "input", "none")


# ---------------------------------------------------------------------------
# layer wrappers (stateful cache around the pure functions)
# ---------------------------------------------------------------------------

class ConvLayer:
    def __init__(self, name: str, p: ConvFilterParams):
        self.name = name
        self.p = p
        self._cache = None

    def forward(self, x: Tensor, train: bool, rng: Prng | None) -> Tensor:
        y, self._cache = conv2d_forward(x, self.p)
        return y

    def backward(self, dldy: Tensor, grads: dict[str, Tensor]) -> Tensor:
        dldx, dv, dg, db = conv2d_backward(self._cache, self.p, dldy)
        grads[self.name + ".v"] = dv
        if dg is not None:
            grads[self.name + ".g"] = dg
        if db is not None:
            grads[self.name + ".b"] = db
        return dldx

    def params(self) -> dict[str, Tensor]:
        out = {self.name + ".v": self.p.v}
        if self.p.g is not None:
            out[self.name + ".g"] = self.p.g
        if self.p.b is not None:
            out[self.name + ".b"] = self.p.b
        return out

    def conv_params(self):
        return [(self.name, self.p)]


class ReluLayer:
    def __init__(self, name: str):
        self.name = name
        self._cache = None

    def forward(self, x, train, rng):
        y, self._cache = relu_forward(x)
        return y

    def backward(self, dldy, grads):
        return relu_backward(dldy, self._cache)

    def params(self):
        return {}

    def conv_params(self):
        return []


class NoiseLayer:
    def __init__(self, name: str, amplitude: float, per_channel: bool = False):
        self.name = name
        self.amplitude = amplitude
        self.per_channel = per_channel
        self._mask = None

    def forward(self, x, train, rng):
        y, self._mask = noise_forward(x, self.amplitude, train, rng,
                                      per_channel=self.per_channel)
        return y

    def backward(self, dldy, grads):
        return noise_backward(dldy, self._mask)

    def params(self):
        return {}

    def conv_params(self):
        return []


class BatchNormLayer:
    def __init__(self, name: str, p: BatchNormParams):
        self.name = name
        self.p = p
        self._cache = None

    def forward(self, x, train, rng):
        y, self._cache = batchnorm_forward(x, self.p, train)
        return y

    def backward(self, dldy, grads):
        dldx, dgamma, dbeta = batchnorm_backward(dldy, self._cache, self.p)
        grads[self.name + ".gamma"] = dgamma
        grads[self.name + ".beta"] = dbeta
        return dldx

    def params(self):
        return {self.name + ".gamma": self.p.gamma, self.name + ".beta": self.p.beta}

    def conv_params(self):
        return []


class GapLayer:
    def __init__(self, name: str):
        self.name = name
        self._cache = None

    def forward(self, x, train, rng):
        y, self._cache = gap_forward(x)
        return y

    def backward(self, dldy, grads):
        return gap_backward(dldy, self._cache)

    def params(self):
        return {}

    def conv_params(self):
        return []


class LinearLayer:
    def __init__(self, name: str, p: LinearParams):
        self.name = name
        self.p = p
        self._cache = None

    def forward(self, x, train, rng):
        y, self._cache = linear_forward(x, self.p)
        return y

    def backward(self, dldy, grads):
        dldx, dw, db = linear_backward(dldy, self._cache, self.p)
        grads[self.name + ".w"] = dw
        if db is not None:
            grads[self.name + ".b"] = db
        return dldx

    def params(self):
        out = {self.name + ".w": self.p.w}
        if self.p.b is not None:
            out[self.name + ".b"] = self.p.b
        return out

    def conv_params(self):
        return []


class ResidualBlockLayer:
    def __init__(self, name: str, blk: ResidualBlockParams):
        self.name = name
        self.blk = blk
        self._cache = None

    def forward(self, x, train, rng):
        y, self._cache = residual_block_forward(x, self.blk, train, rng)
        return y

    def backward(self, dldy, grads):
        dldx, sub = residual_block_backward(dldy, self._cache, self.blk)
        for key, g in sub.items():
            grads[f"{self.name}.{key}"] = g
        return dldx

    def params(self):
        out = {}
        for sub, p in (("conv1", self.blk.conv1), ("conv2", self.blk.conv2)):
            out[f"{self.name}.{sub}.v"] = p.v
            if p.g is not None:
                out[f"{self.name}.{sub}.g"] = p.g
            if p.b is not None:
                out[f"{self.name}.{sub}.b"] = p.b
        for sub, bn in (("bn1", self.blk.bn1), ("bn2", self.blk.bn2)):
            if bn is not None:
                out[f"{self.name}.{sub}.gamma"] = bn.gamma
                out[f"{self.name}.{sub}.beta"] = bn.beta
        return out

    def conv_params(self):
        return [(f"{self.name}.conv1", self.blk.conv1),
                (f"{self.name}.conv2", self.blk.conv2)]

    def bn_params(self):
        return [(f"{self.name}.{sub}", bn)
                for sub, bn in (("bn1", self.blk.bn1), ("bn2", self.blk.bn2))
                if bn is not None]


# ---------------------------------------------------------------------------
# the model container
# ---------------------------------------------------------------------------

@dataclass
class Model:
    """Ordered layer stack with dict-of-arrays parameter access.

    ``params()``/``buffers()`` return live references keyed by dotted layer
    names; mutating those arrays in place is how training and checkpoint
    restore work.
    """

    architecture: str
    arm: str
    in_channels: int
    n_classes: int
    layers: list = field(default_factory=list)

    def forward(self, x: Tensor, train: bool, rng: Prng | None = None) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(
                f"model {self.architecture}: input {x.shape} does not carry "
                f"{self.in_channels} channels")
        for layer in self.layers:
            x = layer.forward(x, train, rng)
        return x

    def backward(self, dldlogits: Tensor) -> dict[str, Tensor]:
        grads: dict[str, Tensor] = {}
        d = dldlogits
        for layer in reversed(self.layers):
            d = layer.backward(d, grads)
        return grads

    def loss_and_grads(self, x: Tensor, labels: np.ndarray, train: bool = True,
                       rng: Prng | None = None):
        """Forward + cross-entropy + full backward.

        Returns (loss, logits, grads).
        """
        logits = self.forward(x, train, rng)
        loss, dlogits = softmax_xent(logits, labels)
        return loss, logits, self.backward(dlogits)

    def predict(self, x: Tensor) -> Tensor:
        """Eval-mode logits (noise off, BN running stats)."""
        return self.forward(x, train=False)

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for layer in self.layers:
            out.update(layer.params())
        return out

    def buffers(self) -> dict[str, Tensor]:
        """Non-trained state (batch-norm running statistics)."""
        out: dict[str, Tensor] = {}
        for name, bn in self.named_bn_params():
            out[name + ".running_mean"] = bn.running_mean
            out[name + ".running_var"] = bn.running_var
        return out

    def named_conv_params(self):
        pairs = []
        for layer in self.layers:
            pairs.extend(layer.conv_params())
        return pairs

    def named_bn_params(self):
        pairs = []
        for layer in self.layers:
            if isinstance(layer, BatchNormLayer):
                pairs.append((layer.name, layer.p))
            elif isinstance(layer, ResidualBlockLayer):
                pairs.extend(layer.bn_params())
        return pairs

    def decayable_param_names(self) -> list[str]:
        """Weight-decay targets: conv kernels and linear weight matrices."""
        names = [name + ".v" for name, _ in self.named_conv_params()]
        names += [layer.name + ".w" for layer in self.layers
                  if isinstance(layer, LinearLayer)]
        return names

    def fold(self) -> "Model":
        """Inference copy with every exp(g) scale folded into its kernel."""
        import copy
        m = copy.deepcopy(self)
        for _, p in m.named_conv_params():
            if p.g is not None:
                p.v = p.kernel()
                p.g = None
        return m

    def n_params(self) -> int:
        return sum(p.size for p in self.params().values())


# ---------------------------------------------------------------------------
# initializers
# ---------------------------------------------------------------------------

def _he_normal(shape, rng: Prng) -> Tensor:
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(shape, std=math.sqrt(2.0 / fan_in))


def _make_conv(shape, stride: int, pad: int, first: bool, arm: str,
               cfg: MsrConfig, rng: Prng) -> ConvFilterParams:
    f, c, kh, kw = shape
    spatial = kh * kw > 1
    if arm == "msr":
        eligible = spatial and (cfg.first_layer_czm or not first)
        v = czmi_init(shape, rng) if eligible else unit_uniform_init(shape, rng)
        g = np.full(f, math.log(cfg.init_scale))
        return ConvFilterParams(v=v, g=g, b=None, czm_eligible=eligible,
                                stride=stride, padding=pad)
    v = _he_normal(shape, rng)
    b = np.zeros(f) if arm == "plain" else None
    return ConvFilterParams(v=v, g=None, b=b, czm_eligible=False,
                            stride=stride, padding=pad)


def _make_bn(channels: int) -> BatchNormParams:
    return BatchNormParams(gamma=np.ones(channels), beta=np.zeros(channels))


def _make_linear(in_dim: int, out_dim: int, rng: Prng) -> LinearParams:
    bound = 1.0 / math.sqrt(in_dim)
    w = rng.uniform(-bound, bound, shape=(out_dim, in_dim))
    return LinearParams(w=w, b=np.zeros(out_dim))


# ---------------------------------------------------------------------------
# architectures
# ---------------------------------------------------------------------------

# (out_channels, stride) per conv; every kernel is 3x3 pad 1
TINYCNN_CONVS = [(12, 1), (24, 2), (24, 2)]
VGGSMALL_CONVS = [(32, 1), (32, 2), (64, 1), (64, 2), (128, 1), (128, 2)]
RESNET_STAGE_CHANNELS = (16, 32, 64)

_RESNET_MINI = re.compile(r"^resnet-mini(?:-(\d+))?$")


def resnet_blocks_per_stage(name: str) -> int:
    """Depth N = 6n+2 -> n blocks per stage (resnet110 -> 18)."""
    if name == "resnet110":
        return 18
    m = _RESNET_MINI.match(name)
    if m is None:
        raise ConfigError(f"not a resnet name: {name!r}")
    depth = int(m.group(1)) if m.group(1) else 8
    if depth < 8 or (depth - 2) % 6 != 0:
        raise ConfigError(
            f"resnet-mini-N: N must be 6n+2 with n >= 1, got {depth}")
    return (depth - 2) // 6


def known_architectures() -> list[str]:
    return ["tinycnn", "vggsmall", "resnet-mini-N (N = 6n+2)", "resnet110"]


def _build_plain_stack(convs, model: Model, arm: str, cfg: MsrConfig,
                       noise_position: str, rng: Prng) -> None:
    c_in = model.in_channels
    noise_on = arm == "msr" and cfg.noise_amplitude > 0.0 \
        and noise_position != "none"
    if noise_on and noise_position == "input":
        model.layers.append(NoiseLayer("noise0", cfg.noise_amplitude))
    for i, (c_out, stride) in enumerate(convs):
        name = f"conv{i + 1}"
        if noise_on and i > 0 and noise_position in ("hidden", "auto"):
            model.layers.append(NoiseLayer(f"noise{i + 1}", cfg.noise_amplitude))
        p = _make_conv((c_out, c_in, 3, 3), stride, 1, first=i == 0,
                       arm=arm, cfg=cfg, rng=rng)
        model.layers.append(ConvLayer(name, p))
        if arm == "batchnorm-baseline":
            model.layers.append(BatchNormLayer(f"bn{i + 1}", _make_bn(c_out)))
        model.layers.append(ReluLayer(f"relu{i + 1}"))
        c_in = c_out
    model.layers.append(GapLayer("gap"))
    model.layers.append(LinearLayer("fc", _make_linear(c_in, model.n_classes, rng)))


def _build_resnet(n_blocks: int, model: Model, arm: str, cfg: MsrConfig,
                  rng: Prng) -> None:
    c_in = model.in_channels
    p = _make_conv((RESNET_STAGE_CHANNELS[0], c_in, 3, 3), 1, 1, first=True,
                   arm=arm, cfg=cfg, rng=rng)
    model.layers.append(ConvLayer("conv1", p))
    if arm == "batchnorm-baseline":
        model.layers.append(BatchNormLayer("bn1", _make_bn(RESNET_STAGE_CHANNELS[0])))
    model.layers.append(ReluLayer("relu1"))

    amplitude = cfg.noise_amplitude if arm == "msr" else 0.0
    c_in = RESNET_STAGE_CHANNELS[0]
    for s, c_out in enumerate(RESNET_STAGE_CHANNELS, start=1):
        for b in range(1, n_blocks + 1):
            stride = 2 if (s > 1 and b == 1) else 1
            conv1 = _make_conv((c_out, c_in, 3, 3), stride, 1, first=False,
                               arm=arm, cfg=cfg, rng=rng)
            conv2 = _make_conv((c_out, c_out, 3, 3), 1, 1, first=False,
                               arm=arm, cfg=cfg, rng=rng)
            bn = arm == "batchnorm-baseline"
            blk = ResidualBlockParams(
                conv1=conv1, conv2=conv2,
                bn1=_make_bn(c_out) if bn else None,
                bn2=_make_bn(c_out) if bn else None,
                noise_amplitude=amplitude)
            name = f"stage{s}.block{b}"
            model.layers.append(ResidualBlockLayer(name, blk))
            model.layers.append(ReluLayer(name + ".relu"))
            c_in = c_out
    model.layers.append(GapLayer("gap"))
    model.layers.append(LinearLayer("fc", _make_linear(c_in, model.n_classes, rng)))


def build_model(architecture: str, arm: str, cfg: MsrConfig, rng: Prng,
                in_channels: int = 3, n_classes: int = 10,
                noise_position: str = "auto") -> Model:
    """Assemble a named architecture for one method arm.

    All weight draws come from ``rng`` in layer order, so (seed, config)
    pins the initial model exactly.
    """
    if arm not in ARMS:
        raise ConfigError(f"unknown arm {arm!r}; valid: {', '.join(ARMS)}")
    if noise_position not in NOISE_POSITIONS:
        raise ConfigError(
            f"unknown noise position {noise_position!r}; valid: "
            f"{', '.join(NOISE_POSITIONS)}")
    cfg.validate()
    model = Model(architecture=architecture, arm=arm,
                  in_channels=in_channels, n_classes=n_classes)
    if architecture == "tinycnn":
        _build_plain_stack(TINYCNN_CONVS, model, arm, cfg, noise_position, rng)
    elif architecture == "vggsmall":
        _build_plain_stack(VGGSMALL_CONVS, model, arm, cfg, noise_position, rng)
    elif architecture == "resnet110" or _RESNET_MINI.match(architecture):
        _build_resnet(resnet_blocks_per_stage(architecture), model, arm, cfg, rng)
    else:
        raise ConfigError(
            f"unknown architecture {architecture!r}; valid: "
            f"{', '.join(known_architectures())}")
    return model
