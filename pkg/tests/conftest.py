"""Shared fixtures: a small synthetic corpus, a curated segment store, and a
tiny pretraining run reused across the downstream/annotation/CLI tests.

A session-level registry collects the acceptance-criteria verdicts so the
terminal summary always shows one PASS/FAIL line per criterion.
"""

from __future__ import annotations

import numpy as np
import pytest
import torch

from telecg.curate import build_dataset
from telecg.encoder import EncoderSpec
from telecg.pretrain import (PretrainSettings, ScheduleSpec, SegmentStore,
                             make_split, pretrain_loop)
from telecg.segio import read_jsonl
from telecg.synth import CohortConfig, synthesize_cohort

torch.set_num_threads(1)

UNIT_COHORT_SEED = 5      # val split carries both sexes and both rhythm classes
UNIT_SPLIT_SEED = 5
UNIT_N_PATIENTS = 10
UNIT_DURATION_S = 7200.0  # two hour blocks -> two segments per patient


# ---------------------------------------------------------------------------
# acceptance criterion reporting

_criterion_lines: dict[int, tuple[bool, str]] = {}


def record_criterion(num: int, passed: bool, detail: str) -> None:
    _criterion_lines[num] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _criterion_lines:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_criterion_lines):
        passed, detail = _criterion_lines[num]
        word = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"CRITERION {num:02d}: {word} - {detail}")


# ---------------------------------------------------------------------------
# small shared corpus


@pytest.fixture(scope="session")
def unit_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("unit_corpus")
    cohort = CohortConfig()
    index = synthesize_cohort(root, cohort, UNIT_N_PATIENTS, UNIT_DURATION_S,
                              UNIT_COHORT_SEED)
    entries = [(row["path"], row["sidecar"]) for row in index]
    rows, failures = build_dataset(entries, root)
    assert not failures, failures
    return {
        "root": root,
        "cohort": cohort,
        "seed": UNIT_COHORT_SEED,
        "index": index,
        "manifest_rows": rows,
        "manifest_path": root / "manifest.jsonl",
        "records_dir": root / "records",
    }


@pytest.fixture(scope="session")
def unit_store(unit_corpus):
    rows = read_jsonl(unit_corpus["manifest_path"])
    return SegmentStore(rows)


@pytest.fixture(scope="session")
def unit_split(unit_store):
    return make_split(unit_store.patient_ids(), val_fraction=0.3,
                      seed=UNIT_SPLIT_SEED)


def tiny_settings(**overrides) -> PretrainSettings:
    base = dict(
        queue_size=64,
        temperature=0.1,
        batch_size=4,
        val_batch_size=8,
        momentum=0.99,
        weight_decay=1e-4,
        retrieval_patients=3,
        retrieval_segments=2,
        schedule=ScheduleSpec(initial_lr=6.25e-4, final_lr=1e-6,
                              warmup_epochs=1, total_epochs=2),
    )
    base.update(overrides)
    return PretrainSettings(**base)


@pytest.fixture(scope="session")
def tiny_pretrain(tmp_path_factory, unit_store, unit_split):
    """A two-epoch contrastive run on the unit corpus; checkpoints on disk."""
    out = tmp_path_factory.mktemp("tiny_pretrain")
    spec = EncoderSpec.from_variant("resnet18")
    summary = pretrain_loop(unit_store, unit_split, spec, tiny_settings(),
                            seed=21, out_dir=out, compute_retrieval=False)
    return {
        "out": out,
        "spec": spec,
        "seed": 21,
        "summary": summary,
        "last": out / "last.ckpt",
        "best": out / "best.ckpt",
        "metrics": out / "metrics.jsonl",
    }


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
