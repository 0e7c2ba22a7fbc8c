"""Shared fixtures and the acceptance-criteria terminal report.

Every test in test_acceptance.py maps to one named criterion below; after a
run that included any of them, a one-line PASS/FAIL verdict per criterion is
appended to the terminal summary.  Tests can attach free-form context (e.g.
the recorded outcome of a non-gated contrast arm) via the `acceptance_notes`
fixture.
"""
from __future__ import annotations

import os
import time

import numpy as np
import pytest

# ---------------------------------------------------------------------------
# acceptance report

# test function name -> (criterion id, one-line label)
CRITERIA = {
    "test_c01_shift_rejection": (
        "1", "shift rejection: CZM conv output unchanged by per-channel "
             "input offsets (<= 1e-9)"),
    "test_c02_czmi_contract": (
        "2", "CZMI contract: slice means <= 1e-9, filter norms 1 +/- 1e-9 "
             "over 1000 shapes"),
    "test_c03_czmg_algebra": (
        "3", "CZMG algebra: new slice mean = (1-z) * old to 1e-12"),
    "test_c04_isocline_closure": (
        "4", "isocline closure: z=1 training keeps slice means <= 1e-8 "
             "for 1000 steps"),
    "test_c05_gradient_fidelity": (
        "5", "gradient fidelity: all backwards match finite differences "
             "(rel err <= 1e-5, 100 instances each)"),
    "test_c06_luma_anchoring": (
        "6", "LUMA anchoring: all filter norms in [0.8, 1.2] after 2000 "
             "steps"),
    "test_c07_effective_lr_formula": (
        "7", "effective-lr formula: effective_lr(0.1, 0.5) == 0.4 exactly"),
    "test_c08a_training_smoke_tinycnn": (
        "8a", "training smoke: tinycnn >= 90% train accuracy within 2000 "
              "steps, < 3 min"),
    "test_c08b_training_smoke_resnet_mini": (
        "8b", "training smoke: resnet-mini 5 epochs at lr 0.4, no NaN, "
              ">= 4x chance on test subset"),
    "test_c09_high_lr_contrast": (
        "9", "high-lr contrast: msr completes 500 steps at lr 0.4; plain "
             "arm outcome recorded"),
    "test_c10_paper_protocol_config_ships": (
        "10", "full-protocol recipe: configs/resnet110-paper.cfg ships "
              "with the published values"),
    "test_c11_determinism_and_resume": (
        "11", "determinism: same seed -> identical metrics; resume "
              "reproduces the run bitwise"),
    "test_c12_cifar10_parser": (
        "12", "CIFAR-10 parser: fixtures round-trip, malformed rejected, "
              "real file -> 10000 records"),
}

_NOTES: dict[str, str] = {}


@pytest.fixture(scope="session")
def acceptance_notes():
    """Mutable criterion-id -> free-text map echoed in the final report."""
    return _NOTES


def _criterion_for(nodeid: str):
    if "test_acceptance" not in nodeid:
        return None
    name = nodeid.rsplit("::", 1)[-1]
    return CRITERIA.get(name)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    seen: dict[str, tuple[str, str, str]] = {}
    for outcome, verdict in (("passed", "PASS"), ("failed", "FAIL"),
                             ("error", "FAIL"), ("skipped", "SKIP")):
        for rep in terminalreporter.stats.get(outcome, ""):
            nodeid = getattr(rep, "nodeid", "")
            crit = _criterion_for(nodeid)
            if crit is None:
                continue
            # setup errors count; teardown noise does not overwrite a verdict
            if getattr(rep, "when", "call") == "teardown" and crit[0] in seen:
                continue
            seen[crit[0]] = (verdict, crit[1], nodeid)
    if not seen:
        return
    tw = terminalreporter
    tw.section("acceptance criteria")
    for cid in sorted(seen, key=lambda s: (int("".join(filter(str.isdigit, s))), s)):
        verdict, label, _ = seen[cid]
        tw.write_line(f"criterion {cid:>3}  {verdict:4}  {label}")
        if cid in _NOTES:
            tw.write_line(f"              note: {_NOTES[cid]}")


# ---------------------------------------------------------------------------
# shared training runs (expensive; computed once per session)

REFERENCE_STEPS = 2000


@pytest.fixture(scope="session")
def reference_tinycnn_run(tmp_path_factory):
    """The 2000-step tinycnn reference run shared by criteria 6 and 8a.

    Protocol (recorded in docs/reference-runs.md): tinycnn / msr / seed 0,
    synthetic 4 classes x 256/class at 16x16, batch 32, lr 0.1 constant,
    momentum 0.9, zmg 0.85, luma 5e-4, init scale 0.8, noise 0.1, no
    augmentation.
    """
    from msrkit.config import ExperimentConfig
    from msrkit.harness import train

    cfg = ExperimentConfig(
        architecture="tinycnn", arm="msr", seed=0,
        out_dir=str(tmp_path_factory.mktemp("ref-tinycnn")),
        epochs=200, max_steps=REFERENCE_STEPS, batch_size=32, eval_every=1000,
        lr=0.1, momentum=0.9, schedule="",
        zmg=0.85, luma_weight=5e-4, init_scale=0.8, noise_amplitude=0.1,
        dataset="synthetic", synthetic_classes=4, synthetic_per_class=256,
        synthetic_size=16, augment="none",
    )
    t0 = time.perf_counter()
    result = train(cfg)
    elapsed = time.perf_counter() - t0
    return result, elapsed


@pytest.fixture(scope="session")
def cifar_subset_dir(tmp_path_factory):
    """A CIFAR-10-format data directory for the desk-scale resnet runs.

    Prefers the real dataset at data/cifar-10-batches-bin (repo root).  When
    absent (no network in the build environment), synthesizes a stand-in with
    the same binary layout: 10-class procedural images, 500/class training
    split serialized across the five data_batch files, a clean 1000-record
    test_batch, and 25% seeded label corruption on the training split only.
    The corruption emulates real-data hardness: it keeps the loss from
    collapsing within the first epochs, which is what keeps gradient
    magnitudes in the regime the desk-scale criteria probe.

    Returns (path, is_real).
    """
    from msrkit.data import (CIFAR_TEST_FILE, CIFAR_TRAIN_FILES, Dataset,
                             gen_synthetic)
    from msrkit.tensor import Prng

    repo_root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    real = os.path.join(repo_root, "data", "cifar-10-batches-bin")
    if all(os.path.exists(os.path.join(real, f))
           for f in CIFAR_TRAIN_FILES + [CIFAR_TEST_FILE]):
        return real, True

    root = str(tmp_path_factory.mktemp("fake-cifar"))
    train_ds = gen_synthetic(10, 500, 32, Prng.derive(777, 4))
    test_ds = gen_synthetic(10, 100, 32, Prng.derive(777, 5))
    labels = train_ds.labels.copy()
    rng = Prng.derive(777, 6)
    n_bad = len(labels) // 4
    hit = rng.permutation(len(labels))[:n_bad]
    labels[hit] = (labels[hit] + 1 + rng.integers(9, (n_bad,))) % 10
    blob = Dataset(train_ds.images, labels).to_cifar_bytes()
    rec_bytes = 3073
    per = len(labels) // len(CIFAR_TRAIN_FILES)
    for i, name in enumerate(CIFAR_TRAIN_FILES):
        with open(os.path.join(root, name), "wb") as fh:
            fh.write(blob[i * per * rec_bytes:(i + 1) * per * rec_bytes])
    with open(os.path.join(root, CIFAR_TEST_FILE), "wb") as fh:
        fh.write(test_ds.to_cifar_bytes())
    return root, False
