"""Run metrics: CSV rows with round-trip float formatting.

``metrics.csv`` holds only numbers that are a pure function of (seed,
config) — training with the same seed twice must produce byte-identical
files.  Wall-clock timings therefore live in a ``timing.csv`` sidecar
rather than in the metrics rows themselves.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, fields


@dataclass
class MetricsRow:
    """One logged epoch (or the final partial epoch under a step cap)."""

    epoch: int
    step: int
    lr: float
    train_loss: float
    train_acc: float
    test_acc: float | None         # None off the eval cadence
    penalty: float                 # anchor / weight-decay term this epoch
    w_norm_mean: float
    w_norm_min: float
    w_norm_max: float
    max_abs_slice_mean: float
    eff_lr_mean: float
    wall_clock_s: float            # routed to timing.csv, see module doc


METRICS_COLUMNS = [f.name for f in fields(MetricsRow) if f.name != "wall_clock_s"]


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)   # shortest string that round-trips in 64-bit
    return str(value)


def format_metrics(rows: list[MetricsRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_COLUMNS)
    for row in rows:
        writer.writerow([_fmt(getattr(row, col)) for col in METRICS_COLUMNS])
    return buf.getvalue()


def write_metrics(rows: list[MetricsRow], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(format_metrics(rows))


def write_timing(rows: list[MetricsRow], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["epoch", "step", "wall_clock_s"])
        for row in rows:
            writer.writerow([row.epoch, row.step, f"{row.wall_clock_s:.3f}"])


def read_metrics(path: str) -> list[dict]:
    """Parse a metrics file back into typed dicts (None for blank cells)."""
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        out = []
        for line in reader:
            row = {}
            for key, text in line.items():
                if text == "":
                    row[key] = None
                elif key in ("epoch", "step"):
                    row[key] = int(text)
                else:
                    row[key] = float(text)
            out.append(row)
    return out


def write_trials_summary(final_accs: dict[int, float], path: str) -> None:
    """Per-seed final test accuracy plus a mean/std summary row."""
    import math

    vals = list(final_accs.values())
    n = len(vals)
    mean = sum(vals) / n
    std = math.sqrt(sum((v - mean) ** 2 for v in vals) / (n - 1)) if n > 1 else 0.0
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["seed", "final_test_acc"])
        for seed in sorted(final_accs):
            writer.writerow([seed, repr(final_accs[seed])])
        writer.writerow(["mean", repr(mean)])
        writer.writerow(["std", repr(std)])
