import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from noisefit.model import ModelConfig, TransformerModel

settings.register_profile("ci", max_examples=60, deadline=None, derandomize=True,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")


def tiny_config(**kw):
    base = dict(n_layers=2, hidden_dim=16, n_heads=2, vocab_size=32, max_seq_len=16, lora_rank=4,
                lora_alpha=8.0, lora_dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model():
    model = TransformerModel(tiny_config(), seed=3)
    model.set_finetune_mode("full")
    return model.eval()


@pytest.fixture
def tokens():
    return np.random.default_rng(0).integers(0, 32, (2, 6))


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS):
        terminalreporter.write_line(line)
