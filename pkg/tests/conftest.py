import numpy as np
import pytest
from hypothesis import settings

from scalemetric.config import RunConfig, apply_overrides
from scalemetric.synthdata import DatasetConfig, generate_dataset
from scalemetric.trainer import pool_dataset

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def small_overrides(**extra):
    ov = {
        "data.num_identities": 12,
        "data.num_scenes": 30,
        "trainer.epochs": 3,
        "dbscan.eps": 0.1,
    }
    ov.update(extra)
    return ov


@pytest.fixture
def small_config():
    return apply_overrides(RunConfig(), small_overrides())


@pytest.fixture(scope="session")
def small_dataset():
    cfg = apply_overrides(RunConfig(), small_overrides())
    return generate_dataset(cfg.data, 3)


@pytest.fixture(scope="session")
def small_inputs(small_dataset):
    cfg = apply_overrides(RunConfig(), small_overrides())
    tc = cfg.trainer
    return pool_dataset(small_dataset, tc.presets(), tc.use_mask, cfg.encoder.grid)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def central_diff(fn, x, h=1e-6):
    """Numerical gradient of scalar ``fn`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + h
        up = fn(x)
        flat[k] = old - h
        down = fn(x)
        flat[k] = old
        gf[k] = (up - down) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
