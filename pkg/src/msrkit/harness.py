"""Training loop, evaluation, inspection, and checkpoint resume.

Everything a run produces is a pure function of (seed, config): the root
seed fans out into fixed derived streams (model init, forward noise, batch
shuffling, augmentation, synthetic train/test data), and each consumer
draws from its own stream in a fixed order.  Checkpoints capture the
model, the optimizer buffers, every stream's state, and the counters, so
restoring one mid-run continues the surviving trajectory bitwise.

Epochs are 0-based internally (epoch e trains, then logs as row e+1); the
rate schedule is closed-left on the internal index, so "anneal at 100"
means the first 100 epochs run at the base rate.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, restore_arrays, save_checkpoint
from .config import (
    ExperimentConfig,
    config_from_dict,
    config_to_dict,
    echo_resolved,
)
from .data import (
    ChannelStats,
    Dataset,
    batch_iter,
    compute_stats,
    gen_synthetic,
    load_cifar10_dir,
    normalize_images,
)
from .errors import ConfigError, DataError, DivergenceError
from .metrics import MetricsRow, write_metrics, write_timing, write_trials_summary
from .models import Model, build_model
from .msr import DEFLATED_NORM, shift_diagnostics
from .optim import (
    LrSchedule,
    SgdMomentum,
    baseline_l2_step,
    lr_at,
    msr_update_pipeline,
    plain_step,
)
from .tensor import Prng

# fixed fan-out of the root seed into independent streams
STREAM_INIT = 0
STREAM_NOISE = 1
STREAM_BATCH = 2
STREAM_AUGMENT = 3
STREAM_TRAIN_DATA = 4
STREAM_TEST_DATA = 5

SYNTHETIC_TEST_FRACTION = 5   # test set holds per_class // 5 + 1 per class


@dataclass
class TrainResult:
    config: ExperimentConfig
    rows: list[MetricsRow]
    model: Model
    stats: ChannelStats
    final_test_acc: float
    out_dir: str
    checkpoint_path: str


def load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset, ChannelStats]:
    """Train split, test split, and normalization stats (train split only)."""
    if cfg.dataset == "synthetic":
        train = gen_synthetic(cfg.synthetic_classes, cfg.synthetic_per_class,
                              cfg.synthetic_size,
                              Prng.derive(cfg.seed, STREAM_TRAIN_DATA))
        per_class_test = cfg.synthetic_per_class // SYNTHETIC_TEST_FRACTION + 1
        test = gen_synthetic(cfg.synthetic_classes, per_class_test,
                             cfg.synthetic_size,
                             Prng.derive(cfg.seed, STREAM_TEST_DATA))
    else:
        train = load_cifar10_dir(cfg.cifar10_path, train=True)
        test = load_cifar10_dir(cfg.cifar10_path, train=False)
    if cfg.subset:
        train = train.subset(cfg.subset)
    if cfg.test_subset:
        test = test.subset(cfg.test_subset)
    if len(train) == 0 or len(test) == 0:
        raise DataError(
            f"dataset ended up empty (train {len(train)}, test {len(test)})")
    return train, test, compute_stats(train.images)


def evaluate_model(model: Model, dataset: Dataset, stats: ChannelStats,
                   batch_size: int = 256) -> tuple[float, float]:
    """Top-1 accuracy and mean loss with noise off and scales folded.

    Pure: touches no model/optimizer state and consumes no rng stream.
    """
    from .layers import softmax_xent

    folded = model.fold()
    n = len(dataset)
    correct = 0
    loss_sum = 0.0
    for start in range(0, n, batch_size):
        imgs = dataset.images[start:start + batch_size]
        labels = dataset.labels[start:start + batch_size]
        logits = folded.predict(normalize_images(imgs, stats))
        loss, _ = softmax_xent(logits, labels)
        loss_sum += loss * len(labels)
        correct += int(np.sum(np.argmax(logits, axis=1) == labels))
    return correct / n, loss_sum / n


def _apply_update(model: Model, grads, cfg: ExperimentConfig, opt: SgdMomentum,
                  lr: float) -> float:
    if cfg.arm == "msr":
        return msr_update_pipeline(model, grads, cfg.msr_config(), opt, lr,
                                   czmg_after_momentum=cfg.czmg_after_momentum)
    if cfg.arm == "batchnorm-baseline":
        return baseline_l2_step(model, grads, cfg.weight_decay, opt, lr)
    return plain_step(model, grads, opt, lr)


def _divergence_dump(out_dir: str, model: Model, step: int, epoch: int,
                     lr: float, loss: float) -> str:
    path = os.path.join(out_dir, "divergence.txt")
    diag = shift_diagnostics(model, lr)
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"non-finite loss {loss!r} at step {step} (epoch {epoch + 1}, "
                f"lr {lr})\n\n")
        f.write(format_diagnostics(diag))
    return path


def _all_tensors(model: Model, opt: SgdMomentum) -> dict[str, np.ndarray]:
    out = dict(model.params())
    for name, buf in model.buffers().items():
        out["buffer." + name] = buf
    for name, buf in opt.buffers.items():
        out["optim." + name] = buf
    return out


def _save(path: str, cfg: ExperimentConfig, model: Model, opt: SgdMomentum,
          rngs: dict[str, Prng], stats: ChannelStats, step: int,
          epoch: int) -> None:
    save_checkpoint(
        path,
        config=config_to_dict(cfg),
        step=step,
        epoch=epoch,
        rng_states={k: r.state() for k, r in rngs.items()},
        optimizer={"momentum": opt.momentum, "step_count": opt.step_count},
        stats={"mean": stats.mean.tolist(), "std": stats.std.tolist()},
        tensors=_all_tensors(model, opt),
    )


def rebuild_model(ckpt: Checkpoint) -> tuple[ExperimentConfig, Model, ChannelStats]:
    """Model skeleton from the stored config, arrays overwritten from the payload."""
    cfg = config_from_dict(ckpt.config)
    model = build_model(cfg.architecture, cfg.arm, cfg.msr_config(),
                        Prng.derive(cfg.seed, STREAM_INIT),
                        in_channels=3, n_classes=_n_classes(cfg),
                        noise_position=cfg.noise_position)
    restore_arrays(model.params(), ckpt.tensors)
    restore_arrays(model.buffers(), ckpt.tensors, prefix="buffer.")
    stats = ChannelStats(np.array(ckpt.stats["mean"]), np.array(ckpt.stats["std"]))
    return cfg, model, stats


def _n_classes(cfg: ExperimentConfig) -> int:
    return cfg.synthetic_classes if cfg.dataset == "synthetic" else 10


def train(cfg: ExperimentConfig, resume_from: str | None = None) -> TrainResult:
    """Run the full training protocol; returns the result bundle.

    Raises DivergenceError on a non-finite loss, after writing a
    diagnostics dump into the output directory.
    """
    cfg.validate()
    os.makedirs(cfg.out_dir, exist_ok=True)
    echo_resolved(cfg, os.path.join(cfg.out_dir, "resolved.cfg"))

    train_set, test_set, stats = load_datasets(cfg)
    model = build_model(cfg.architecture, cfg.arm, cfg.msr_config(),
                        Prng.derive(cfg.seed, STREAM_INIT),
                        in_channels=3, n_classes=_n_classes(cfg),
                        noise_position=cfg.noise_position)
    opt = SgdMomentum(model.params(), cfg.momentum)
    rngs = {
        "noise": Prng.derive(cfg.seed, STREAM_NOISE),
        "batch": Prng.derive(cfg.seed, STREAM_BATCH),
        "augment": Prng.derive(cfg.seed, STREAM_AUGMENT),
    }
    step = 0
    start_epoch = 0

    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        saved = config_from_dict(ckpt.config)
        for key in ("architecture", "arm", "dataset", "seed", "batch_size"):
            if getattr(saved, key) != getattr(cfg, key):
                raise ConfigError(
                    f"resume: checkpoint {key}={getattr(saved, key)!r} does not "
                    f"match config {key}={getattr(cfg, key)!r}")
        restore_arrays(model.params(), ckpt.tensors)
        restore_arrays(model.buffers(), ckpt.tensors, prefix="buffer.")
        restore_arrays(opt.buffers, ckpt.tensors, prefix="optim.")
        opt.step_count = ckpt.optimizer["step_count"]
        for name in rngs:
            rngs[name] = Prng.from_state(ckpt.rng_states[name])
        step = ckpt.step
        start_epoch = ckpt.epoch

    schedule = LrSchedule(cfg.lr, cfg.milestones()).validate()
    rows: list[MetricsRow] = []
    step_log: list[tuple[int, int, float, float]] = []
    final_test_acc = float("nan")
    metrics_path = os.path.join(cfg.out_dir, "metrics.csv")
    hit_cap = False

    for epoch in range(start_epoch, cfg.epochs):
        lr = lr_at(schedule, epoch)
        t0 = time.perf_counter()
        loss_sum = 0.0
        penalty_sum = 0.0
        correct = 0
        seen = 0
        n_batches = 0
        aug = rngs["augment"] if cfg.augment != "none" else None
        for batch in batch_iter(train_set, cfg.batch_size, rngs["batch"],
                                drop_last=cfg.drop_last, stats=stats,
                                augment_rng=aug, augment_mode=cfg.augment
                                if cfg.augment != "none" else "translate"):
            loss, logits, grads = model.loss_and_grads(
                batch.x, batch.labels, train=True, rng=rngs["noise"])
            if not np.isfinite(loss):
                dump = _divergence_dump(cfg.out_dir, model, step + 1, epoch, lr, loss)
                raise DivergenceError(
                    f"non-finite loss at step {step + 1}; diagnostics in {dump}")
            penalty_sum += _apply_update(model, grads, cfg, opt, lr)
            step += 1
            n_batches += 1
            loss_sum += loss * len(batch.labels)
            correct += int(np.sum(np.argmax(logits, axis=1) == batch.labels))
            seen += len(batch.labels)
            if cfg.log_every and step % cfg.log_every == 0:
                step_log.append((epoch + 1, step, lr, loss))
            if cfg.max_steps and step >= cfg.max_steps:
                hit_cap = True
                break

        test_acc = None
        if (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1 or hit_cap:
            test_acc, _ = evaluate_model(model, test_set, stats)
            final_test_acc = test_acc
        diag = shift_diagnostics(model, lr)
        norms = diag.all_w_norms()
        rows.append(MetricsRow(
            epoch=epoch + 1,
            step=step,
            lr=lr,
            train_loss=loss_sum / max(seen, 1),
            train_acc=correct / max(seen, 1),
            test_acc=test_acc,
            penalty=penalty_sum / max(n_batches, 1),
            w_norm_mean=float(norms.mean()),
            w_norm_min=float(norms.min()),
            w_norm_max=float(norms.max()),
            max_abs_slice_mean=diag.max_abs_slice_mean,
            eff_lr_mean=diag.mean_effective_lr,
            wall_clock_s=time.perf_counter() - t0,
        ))
        write_metrics(rows, metrics_path)
        write_timing(rows, os.path.join(cfg.out_dir, "timing.csv"))
        if step_log:
            _write_steps(step_log, os.path.join(cfg.out_dir, "steps.csv"))
        if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            _save(os.path.join(cfg.out_dir, f"epoch{epoch + 1:04d}.ckpt"),
                  cfg, model, opt, rngs, stats, step, epoch + 1)
        if hit_cap:
            break

    ckpt_path = os.path.join(cfg.out_dir, "final.ckpt")
    epoch_done = rows[-1].epoch if rows else start_epoch
    _save(ckpt_path, cfg, model, opt, rngs, stats, step, epoch_done)
    if not np.isfinite(final_test_acc):
        final_test_acc, _ = evaluate_model(model, test_set, stats)
    return TrainResult(config=cfg, rows=rows, model=model, stats=stats,
                       final_test_acc=final_test_acc, out_dir=cfg.out_dir,
                       checkpoint_path=ckpt_path)


def _write_steps(entries, path: str) -> None:
    import csv

    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["epoch", "step", "lr", "loss"])
        for epoch, step, lr, loss in entries:
            writer.writerow([epoch, step, repr(lr), repr(loss)])


def run_trials(cfg: ExperimentConfig, n_trials: int) -> dict[int, float]:
    """Seeds seed..seed+N-1, one subdirectory each, plus a summary file."""
    if n_trials < 1:
        raise ConfigError(f"trials must be >= 1, got {n_trials}")
    base_out = cfg.out_dir
    finals: dict[int, float] = {}
    for t in range(n_trials):
        sub = config_from_dict({**config_to_dict(cfg),
                                "seed": cfg.seed + t,
                                "out_dir": os.path.join(base_out,
                                                        f"trial-{cfg.seed + t}")})
        finals[sub.seed] = train(sub).final_test_acc
    os.makedirs(base_out, exist_ok=True)
    write_trials_summary(finals, os.path.join(base_out, "summary.csv"))
    return finals


# ---------------------------------------------------------------------------
# checkpoint-facing commands
# ---------------------------------------------------------------------------

def evaluate_checkpoint(path: str, cfg_override: dict | None = None) -> tuple[float, float]:
    """(accuracy, loss) of a stored model on its configured test split."""
    ckpt = load_checkpoint(path)
    cfg, model, stats = rebuild_model(ckpt)
    if cfg_override:
        cfg = config_from_dict({**config_to_dict(cfg), **cfg_override})
    _, test_set, _ = load_datasets(cfg)
    return evaluate_model(model, test_set, stats)


def format_diagnostics(diag) -> str:
    """Render shift diagnostics as a fixed-width table plus summaries."""
    lines = []
    lines.append(f"{'layer':<28} {'czm':>3} {'max|slice mean|':>16} "
                 f"{'min|W|':>9} {'mean|W|':>9} {'max|W|':>9} {'eff lr':>9}")
    for layer in diag.layers:
        lines.append(
            f"{layer.name:<28} {'yes' if layer.czm_eligible else 'no':>3} "
            f"{layer.max_abs_slice_mean:>16.3e} {layer.w_norms.min():>9.4f} "
            f"{layer.w_norms.mean():>9.4f} {layer.w_norms.max():>9.4f} "
            f"{layer.effective_lrs.mean():>9.4f}")
    norms = diag.all_w_norms()
    lines.append("")
    lines.append(f"filters total: {norms.size}")
    lines.append(f"deflated filters (|W| < {DEFLATED_NORM}): {diag.deflated_count}")
    finite = norms[np.isfinite(norms)]
    if finite.size < norms.size:
        lines.append(f"NON-FINITE |W| on {norms.size - finite.size} filters")
    if finite.size:
        lines.append("|W| histogram:")
        hist, edges = np.histogram(finite, bins=10)
        for count, lo, hi in zip(hist, edges[:-1], edges[1:]):
            bar = "#" * int(round(40 * count / max(hist.max(), 1)))
            lines.append(f"  [{lo:7.4f}, {hi:7.4f}) {count:>6} {bar}")
    lines.append(f"max abs slice mean (eligible layers): "
                 f"{diag.max_abs_slice_mean:.3e}")
    lines.append(f"mean effective lr at lr={diag.lr}: "
                 f"{diag.mean_effective_lr:.4f}")
    return "\n".join(lines) + "\n"


def inspect_checkpoint(path: str) -> str:
    ckpt = load_checkpoint(path)
    cfg, model, _ = rebuild_model(ckpt)
    lr = lr_at(LrSchedule(cfg.lr, cfg.milestones()), max(ckpt.epoch - 1, 0))
    head = (f"checkpoint {path}\n"
            f"architecture {cfg.architecture}  arm {cfg.arm}  "
            f"epoch {ckpt.epoch}  step {ckpt.step}  "
            f"params {model.n_params()}\n\n")
    return head + format_diagnostics(shift_diagnostics(model, lr))
