import json
import os
from pathlib import Path

import numpy as np
import pytest
import torch

from sfseg.soman import Architecture, SomanModel
from sfseg.synthdata import Dataset, DomainSpec

torch.set_num_threads(1)

TINY = Architecture(widths=(6, 8, 8), strides=(1, 2, 2))
ACCEPTANCE_CFG = json.loads((Path(__file__).resolve().parents[1] / "configs" / "acceptance.json").read_text())


@pytest.fixture(scope="session")
def spec():
    return DomainSpec()


@pytest.fixture(scope="session")
def small_spec():
    return DomainSpec(resolution=(32, 64))


@pytest.fixture(scope="session")
def small_data(small_spec):
    return Dataset.generate(small_spec, 12, 3)


@pytest.fixture
def tiny_lo(small_data):
    torch.manual_seed(0)
    return SomanModel(8, 3, "LOpp", [2, 1, 5], TINY, seed=1)


def rand_image(seed, shape=(64, 128)):
    return np.random.default_rng(seed).random((*shape, 3)).astype(np.float32)


# ---------------------------------------------------------------- acceptance plumbing

ACCEPTANCE = {}


@pytest.fixture
def verdict():
    """Record one pass/fail line per acceptance criterion; printed at the end of the session."""

    def record(num, ok, detail):
        ACCEPTANCE[num] = (bool(ok), detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


def full_run(out_dir, seed, config=None):
    """``sfseg all`` for one seed; resumes whatever is already complete in ``out_dir``."""
    from sfseg.cli import main
    argv = ["--seed", str(seed), "--output-dir", str(out_dir), "--resume"]
    if config:
        argv += ["--config", str(config)]
    rc = main(argv + ["all"])
    assert rc == 0, f"run all failed for seed {seed} (exit {rc})"
    return Path(out_dir)


@pytest.fixture(scope="session")
def run_root(tmp_path_factory):
    """Where full runs live; set SFSEG_RUN_CACHE to reuse them between sessions."""
    cache = os.environ.get("SFSEG_RUN_CACHE")
    return Path(cache) if cache else tmp_path_factory.mktemp("runs")


@pytest.fixture(scope="session")
def seed_runs(run_root):
    """Full default-config runs for the acceptance seeds."""
    seeds = ACCEPTANCE_CFG["seeds"]
    return {s: full_run(run_root / f"seed{s}", s) for s in seeds}
