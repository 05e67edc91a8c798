from __future__ import annotations

import numpy as np
import pytest

from sata.data import make_synthetic, split_dataset
from sata.harness import RunConfig

WORKED_ROW = np.array([0.40, 0.30, 0.20, 0.06, 0.04])

_criteria: dict[str, tuple[str, str]] = {}


def random_softmax_rows(rng: np.random.Generator, rows: int, n: int, spread: float = 3.0) -> np.ndarray:
    logits = rng.normal(0.0, spread, size=(rows, n))
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def worked_row():
    return WORKED_ROW.copy()


@pytest.fixture(scope="session")
def tiny_config():
    """Smallest run that still exercises every code path (two layers, 8x8 images)."""
    return RunConfig(
        image_size=8,
        patch_size=4,
        embed_dim=16,
        depth=2,
        num_heads=2,
        mlp_ratio=2.0,
        batch_size=16,
        micro_batch=0,
        epochs=1,
        lr1=1e-3,
        lr2=1e-3,
        synthetic_n=48,
        synthetic_classes=2,
        out="",
    )


@pytest.fixture(scope="session")
def synthetic_split():
    ds = make_synthetic(60, 2, image_size=8, seed=0)
    return split_dataset(ds, 0.25, seed=0)


# ---- acceptance summary: one line per criterion at the end of the run


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    for key, value in report.user_properties:
        if key == "criterion":
            _criteria[value] = ("PASS" if report.passed else "FAIL", report.nodeid)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_criteria, key=lambda k: int(k.split()[0][2:])):
        verdict, _ = _criteria[name]
        terminalreporter.write_line(f"{verdict}  {name}")
