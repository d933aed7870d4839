"""Shared fixtures. The desk_run fixture is the expensive one: it executes
the full reference training command once per session and several acceptance
tests read from it."""

from __future__ import annotations

import csv
import json
import time
from pathlib import Path

import pytest

from psm import cli

DESK_ARGS = [
    "pretrain",
    "--synthetic",
    "c4,d32,n512,sep6",
    "--epochs",
    "100",
    "--seed",
    "7",
]


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory) -> dict:
    """One full-scale training run through the CLI, timed."""
    out = tmp_path_factory.mktemp("desk") / "run1"
    t0 = time.monotonic()
    code = cli.main(DESK_ARGS + ["--out", str(out)])
    elapsed = time.monotonic() - t0
    assert code == 0
    rows = list(csv.DictReader(open(out / "metrics.csv", encoding="utf-8")))
    summary = json.loads((out / "summary.json").read_text(encoding="utf-8"))
    return {
        "dir": out,
        "metrics": rows,
        "summary": summary,
        "elapsed": elapsed,
        "checkpoint": out / "checkpoint.psmc",
    }


@pytest.fixture()
def tiny_sets():
    """Small train/test pair shared by trainer-level tests."""
    from psm import gen_clusters

    train = gen_clusters(3, 32, 16, 6.0, seed=11, split="train")
    test = gen_clusters(3, 8, 16, 6.0, seed=11, split="test")
    return train, test
