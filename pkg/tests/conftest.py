import numpy as np
import pytest
import torch

from sense.backbone import BackboneConfig, build_backbone
from sense.dataset import _as_loaded, synth_corpus
from sense.model import ModelConfig, SenseModel


@pytest.fixture(scope="session")
def small_cfg():
    """Toy model at 64 px (4x4 token grid) for fast end-to-end tests."""
    return ModelConfig(backbone=BackboneConfig(input_resolution=64))


@pytest.fixture(scope="session")
def small_model(small_cfg):
    return SenseModel(small_cfg)


@pytest.fixture(scope="session")
def corpus64(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus64")
    return _as_loaded(synth_corpus(6, 64, 0, out)), out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def acceptance(request):
    """Record one pass/fail line per acceptance criterion; printed in the terminal summary."""
    log = request.config.stash.setdefault(ACCEPTANCE, {})

    def record(cid: str, ok: bool, detail: str) -> None:
        log[cid] = (ok, detail)
        print(f"{cid} {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, f"{cid}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    log = config.stash.get(ACCEPTANCE, {})
    if not log:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(log, key=lambda c: int(c[1:])):
        ok, detail = log[cid]
        terminalreporter.write_line(f"{cid} {'PASS' if ok else 'FAIL'}  {detail}")
