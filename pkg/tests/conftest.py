import numpy as np
import pytest
from hypothesis import settings

from robustvit.config import TrainConfig

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


def tiny_config(**changes) -> TrainConfig:
    """Very small shapes and budgets for unit tests (not the acceptance config)."""
    base = dict(
        patch=4, det_layers=1, det_hidden=8, det_heads=2, det_mlp=16,
        enc_layers=1, enc_hidden=8, enc_heads=2, enc_mlp=16,
        dec_layers=1, dec_hidden=8, dec_heads=2, dec_mlp=16,
        probe_layers=1, probe_hidden=8, probe_heads=2, probe_mlp=16,
        batch_size=8, det_epochs=1, pretrain_epochs=1, finetune_epochs=1,
        det_warmup=0, pretrain_warmup=0, finetune_warmup=0, crop_pad=1,
    )
    base.update(changes)
    return TrainConfig(**base).validate()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def record(criterion: str, passed: bool, detail: str) -> bool:
    line = f"{'PASS' if passed else 'FAIL'} criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
