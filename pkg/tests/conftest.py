import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

# fixed examples by default so runs are repeatable; `--hypothesis-profile=deep` explores
settings.register_profile("repeatable", derandomize=True, deadline=None)
settings.register_profile("deep", max_examples=3000, deadline=None)
settings.load_profile("repeatable")

from qforge.intrt import export_int  # noqa: E402
from qforge.model import ModelConfig, build  # noqa: E402
from qforge.pipeline import synthetic_task  # noqa: E402
from qforge.train import TrainSpec, fit  # noqa: E402


@pytest.fixture(scope="session")
def sine_small():
    """Sine forecasting fixture with 8-step windows."""
    return synthetic_task("sine-forecast", seed=0, n=8)


@pytest.fixture(scope="session")
def tiny_qat(sine_small):
    """A briefly QAT-trained (n=8, m=1, d=8, b=6) model and its integer export."""
    model = build(sine_small.model_config(8, 6), seed=0, mode="qat")
    fr = fit(model, sine_small.train, sine_small.val, TrainSpec(batch_size=32, lr=3e-3, max_epochs=6, patience=3))
    return fr.model, export_int(fr.model)


@pytest.fixture(scope="session")
def tiny_int(tiny_qat):
    return tiny_qat[1]


def calibrated_qat(config: ModelConfig, seed=0, batches=3, batch=16):
    """QAT model whose observers and BN statistics have seen random data (no training)."""
    rng = np.random.default_rng(seed)
    model = build(config, seed, mode="qat")
    for _ in range(batches):
        model.forward(rng.uniform(0, 1, (batch, config.n, config.m)), training=True)
    model.freeze_observers()
    return model


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number])
