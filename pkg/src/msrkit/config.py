"""Experiment configuration: dataclass, file parsing, validation, echoing.

Config files are line-based ``key = value`` text grouped into sections
(``[run]``, ``[optim]``, ``[msr]``, ``[data]``); ``#`` starts a comment.
Keys are globally unique, so the section is organizational only.  CLI
flags override file values; the fully resolved config is echoed into the
output directory as ``resolved.cfg`` for provenance.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields

from .errors import ConfigError
from .msr import MsrConfig

ARM_NAMES = ("msr", "batchnorm-baseline", "plain")
DATASET_NAMES = ("synthetic", "cifar10")
AUGMENT_MODES = ("none", "translate", "scale")
NOISE_POSITION_NAMES = ("auto", "hidden", "input", "none")

# section layout of the config file (and of the resolved echo)
SECTIONS = {
    "run": ["architecture", "arm", "seed", "out_dir", "epochs", "max_steps",
            "batch_size", "eval_every", "log_every", "checkpoint_every"],
    "optim": ["lr", "momentum", "schedule", "weight_decay",
              "czmg_after_momentum"],
    "msr": ["zmg", "luma_weight", "init_scale", "noise_amplitude",
            "noise_position", "noise_per_channel", "first_layer_czm"],
    "data": ["dataset", "cifar10_path", "subset", "test_subset",
             "synthetic_classes", "synthetic_per_class", "synthetic_size",
             "augment", "drop_last"],
}


@dataclass
class ExperimentConfig:
    """Every knob of one training/eval run, with protocol defaults.

    The stock recipe: 200 epochs of minibatch-128 SGD, momentum 0.9, base
    lr 0.1 annealed by 0.1 at epochs 100 and 150.
    """

    # [run]
    architecture: str = "tinycnn"
    arm: str = "msr"
    seed: int = 0
    out_dir: str = "runs/out"
    epochs: int = 200
    max_steps: int = 0          # 0 = no step cap
    batch_size: int = 128
    eval_every: int = 1         # epochs between test evaluations
    log_every: int = 0          # steps between loss prints (0 = off)
    checkpoint_every: int = 0   # epochs between checkpoints (0 = final only)

    # [optim]
    lr: float = 0.1
    momentum: float = 0.9
    schedule: str = "100:0.1,150:0.1"   # epoch:multiplier pairs
    weight_decay: float = 5e-4          # coupled L2, baseline arms only
    czmg_after_momentum: bool = False   # ablation: transform velocity instead

    # [msr]
    zmg: float = 0.85
    luma_weight: float = 5e-4
    init_scale: float = 0.8
    noise_amplitude: float = 0.1
    noise_position: str = "auto"
    noise_per_channel: bool = False
    first_layer_czm: bool = False

    # [data]
    dataset: str = "synthetic"
    cifar10_path: str = "data/cifar-10-batches-bin"
    subset: int = 0             # train-set cap (0 = all)
    test_subset: int = 0
    synthetic_classes: int = 4
    synthetic_per_class: int = 256
    synthetic_size: int = 16
    augment: str = "translate"
    drop_last: bool = False     # False keeps the last partial batch

    def msr_config(self) -> MsrConfig:
        return MsrConfig(zmg=self.zmg, luma_weight=self.luma_weight,
                         init_scale=self.init_scale,
                         noise_amplitude=self.noise_amplitude,
                         first_layer_czm=self.first_layer_czm)

    def milestones(self) -> tuple[tuple[int, float], ...]:
        return parse_schedule(self.schedule)

    def validate(self) -> "ExperimentConfig":
        if self.arm not in ARM_NAMES:
            raise ConfigError(f"arm must be one of {ARM_NAMES}, got {self.arm!r}")
        if self.dataset not in DATASET_NAMES:
            raise ConfigError(
                f"dataset must be one of {DATASET_NAMES}, got {self.dataset!r}")
        if self.augment not in AUGMENT_MODES:
            raise ConfigError(
                f"augment must be one of {AUGMENT_MODES}, got {self.augment!r}")
        if self.noise_position not in NOISE_POSITION_NAMES:
            raise ConfigError(
                f"noise_position must be one of {NOISE_POSITION_NAMES}, "
                f"got {self.noise_position!r}")
        positive = [("batch_size", self.batch_size), ("eval_every", self.eval_every),
                    ("synthetic_classes", self.synthetic_classes),
                    ("synthetic_size", self.synthetic_size)]
        for name, val in positive:
            if val < 1:
                raise ConfigError(f"{name} must be >= 1, got {val}")
        nonneg = [("epochs", self.epochs), ("max_steps", self.max_steps),
                  ("seed", self.seed), ("subset", self.subset),
                  ("test_subset", self.test_subset),
                  ("synthetic_per_class", self.synthetic_per_class),
                  ("log_every", self.log_every),
                  ("checkpoint_every", self.checkpoint_every),
                  ("weight_decay", self.weight_decay)]
        for name, val in nonneg:
            if val < 0:
                raise ConfigError(f"{name} must be >= 0, got {val}")
        if self.lr <= 0.0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if not self.out_dir:
            raise ConfigError("out_dir must be non-empty")
        self.msr_config().validate()
        parse_schedule(self.schedule)
        # architecture names are checked here too so bad configs die before
        # any data loading
        from .models import _RESNET_MINI, known_architectures
        if self.architecture not in ("tinycnn", "vggsmall", "resnet110"):
            if not _RESNET_MINI.match(self.architecture):
                raise ConfigError(
                    f"unknown architecture {self.architecture!r}; valid: "
                    f"{', '.join(known_architectures())}")
            from .models import resnet_blocks_per_stage
            resnet_blocks_per_stage(self.architecture)
        return self


def parse_schedule(text: str) -> tuple[tuple[int, float], ...]:
    """'100:0.1,150:0.1' -> ((100, 0.1), (150, 0.1)); '' means no milestones."""
    text = text.strip()
    if not text:
        return ()
    out = []
    for part in text.split(","):
        part = part.strip()
        if ":" not in part:
            raise ConfigError(
                f"schedule entry {part!r} is not of the form epoch:multiplier")
        e, m = part.split(":", 1)
        try:
            epoch, mult = int(e), float(m)
        except ValueError:
            raise ConfigError(f"schedule entry {part!r} has a non-numeric field")
        if epoch < 1 or mult <= 0.0:
            raise ConfigError(
                f"schedule entry {part!r}: epoch must be >= 1 and multiplier > 0")
        out.append((epoch, mult))
    epochs = [e for e, _ in out]
    if epochs != sorted(set(epochs)):
        raise ConfigError(f"schedule epochs must be strictly increasing: {text!r}")
    return tuple(out)


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}
_KNOWN_KEYS = set(_FIELD_TYPES)
_BOOL_WORDS = {"true": True, "yes": True, "on": True, "1": True,
               "false": False, "no": False, "off": False, "0": False}


def _coerce(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if kind == "bool":
            word = raw.lower()
            if word not in _BOOL_WORDS:
                raise ValueError
            return _BOOL_WORDS[word]
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"config key {key}: cannot read {raw!r} as {kind}")


def parse_config_file(path: str) -> dict:
    """Read a key=value config file into a {field: value} dict."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path, "r", encoding="utf-8") as f:
            parser.read_file(f)
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}")
    except configparser.Error as e:
        raise ConfigError(f"malformed config file {path}: {e}")
    out = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(
                f"config file {path}: unknown section [{section}] "
                f"(valid: {', '.join(SECTIONS)})")
        for key, raw in parser.items(section):
            if key not in _KNOWN_KEYS:
                raise ConfigError(f"config file {path}: unknown key {key!r}")
            if key not in SECTIONS[section]:
                raise ConfigError(
                    f"config file {path}: key {key!r} belongs in another section")
            out[key] = _coerce(key, raw)
    return out


def make_config(file_values: dict | None = None,
                overrides: dict | None = None) -> ExperimentConfig:
    """Defaults <- config file <- explicit overrides, then validated."""
    cfg = ExperimentConfig()
    for source in (file_values or {}), (overrides or {}):
        for key, val in source.items():
            if key not in _KNOWN_KEYS:
                raise ConfigError(f"unknown config key {key!r}")
            if val is not None:
                setattr(cfg, key, val)
    return cfg.validate()


def format_config(cfg: ExperimentConfig) -> str:
    """Render the resolved config in the same sectioned key=value format."""
    buf = io.StringIO()
    for section, keys in SECTIONS.items():
        buf.write(f"[{section}]\n")
        for key in keys:
            val = getattr(cfg, key)
            if isinstance(val, bool):
                val = "true" if val else "false"
            buf.write(f"{key} = {val}\n")
        buf.write("\n")
    return buf.getvalue()


def echo_resolved(cfg: ExperimentConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(format_config(cfg))


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}


def config_from_dict(d: dict) -> ExperimentConfig:
    return make_config(overrides=d)
