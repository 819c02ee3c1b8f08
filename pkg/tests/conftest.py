import copy

import pytest

from promptlab.bench import DatasetConfig, gen_dataset
from promptlab.experiments import PretrainConfig, pretrain_base
from promptlab.model import ModelConfig, build_model

_ACCEPTANCE: dict[int, tuple[bool, str, str]] = {}


@pytest.fixture
def toy():
    return build_model(ModelConfig())


@pytest.fixture(scope="session")
def base_abc():
    """Toy model pretrained on monolingual A, B and C."""
    return pretrain_base(ModelConfig(), PretrainConfig(languages=("A", "B", "C")))


@pytest.fixture(scope="session")
def base_ac():
    """Toy model pretrained on monolingual A and C only (B stays new)."""
    return pretrain_base(ModelConfig(), PretrainConfig(languages=("A", "C")))


@pytest.fixture(scope="session")
def fresh():
    def make(model):
        m = copy.deepcopy(model)
        for p in m.parameters():
            p.trainable = True
        return m
    return make


@pytest.fixture(scope="session")
def small_cs():
    return list(gen_dataset(DatasetConfig(size=6, min_units=2, max_units=3), seed=5))


@pytest.fixture
def acceptance():
    def record(number: int, title: str, ok: bool, detail: str = ""):
        _ACCEPTANCE[number] = (ok, title, detail)
        print(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, title, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {title} {detail}")
