import numpy as np
import pytest
import torch

from marecg.config import RunConfig
from marecg.ingest import preprocess, synth_corpus
from marecg.ontology import build_graph

torch.set_num_threads(1)

SMOKE_RECORDS = 64
SMOKE_STEPS = 30

# acceptance verdicts collected by tests/test_acceptance.py, echoed in the terminal summary
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def graph():
    return build_graph()


@pytest.fixture(scope="session")
def smoke_config():
    return RunConfig.tiny(ablation="C3")


@pytest.fixture(scope="session")
def smoke_corpus(smoke_config):
    return [preprocess(r, smoke_config.window) for r in synth_corpus(SMOKE_RECORDS, 0, length=3600)]


@pytest.fixture(scope="session")
def smoke_run(smoke_config, smoke_corpus):
    from marecg.trainer import train

    return train(smoke_config, smoke_corpus, max_steps=SMOKE_STEPS)


@pytest.fixture(scope="session")
def probe_corpus(smoke_config):
    classes = ["normal", "lbbb", "ste", "lvh", "twi"]
    records = [preprocess(r, smoke_config.window)
               for r in synth_corpus(150, 1, length=3600, classes=classes, noise_snr_db=20.0)]
    labels = [r.meta["label"] for r in records]
    Y = np.array([[lab == c for c in classes] for lab in labels], dtype=np.uint8)
    return records, Y, classes


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
