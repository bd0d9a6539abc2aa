import json
import time

import numpy as np
import pytest

from hfbrimae.cli import main

from hfbrimae.geom import sample_rotation


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_rotations(n, seed=0):
    return [sample_rotation("R", seed * 100_003 + i) for i in range(n)]


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


DESK = {"seed": 0, "epochs": 50}


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """One desk-scale pretraining run through the CLI, single-threaded."""
    root = tmp_path_factory.mktemp("desk")
    cfg = root / "desk.json"
    cfg.write_text(json.dumps(DESK))
    start = time.perf_counter()
    code = main(["pretrain", "--config", str(cfg), "--out", str(root / "run"), "--threads", "1"])
    return {"code": code, "config": cfg, "out": root / "run", "seconds": time.perf_counter() - start}
