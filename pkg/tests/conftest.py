"""Shared fixtures. The ablation run is session-scoped because it trains two
full models (several minutes); every test that needs its outputs shares one
run."""

import time

import pytest

from fusformer.cli import run


@pytest.fixture(scope="session")
def ablation_run(tmp_path_factory):
    """Run the default ablation command once; returns (output dir, seconds)."""
    out = tmp_path_factory.mktemp("ablation")
    t0 = time.perf_counter()
    code = run(["ablate", "--out", str(out)])
    wall = time.perf_counter() - t0
    assert code == 0, "ablate command failed"
    return out, wall
