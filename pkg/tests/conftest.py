import os

import pytest
import torch
from hypothesis import HealthCheck, settings

from mechbench.model import ModelConfig, init_model
from mechbench.pipeline import prepare_model, recipe_config
from mechbench.tasks import generate, task_vocab

settings.register_profile("default", deadline=None, max_examples=30,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.register_profile("thorough", deadline=None, max_examples=300,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

run_config = recipe_config


def trained_model(task: str, seed: int = 0):
    """Trained toy model for ``task``; cached on disk across test sessions."""
    return prepare_model(task, run_config(task, seed))


@pytest.fixture(scope="session")
def ioi_model():
    return trained_model("ioi", 0)


@pytest.fixture(scope="session")
def mcqa_model():
    return trained_model("mcqa", 0)


@pytest.fixture(scope="session")
def arithmetic_model():
    return trained_model("arithmetic", 0)


def small_model(task: str = "ioi", seed: int = 0, **overrides):
    vocab = task_vocab(task)
    cfg = dict(n_layers=2, n_heads=4, d_model=16, d_head=4, d_mlp=32, vocab_size=len(vocab), max_seq_len=48, seed=seed)
    cfg.update(overrides)
    return init_model(ModelConfig(**cfg), vocab=vocab)


@pytest.fixture
def tiny_ioi():
    """Untrained 2x4 model with the IOI vocabulary (d_model 16)."""
    return small_model("ioi")


@pytest.fixture(scope="session")
def ioi_instances():
    return generate("ioi", 24, 0, "validation")


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


# ----------------------------------------------------------------------------
# acceptance summary: one pass/fail line per criterion

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, name): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    n, name = mark.args
    entry = _CRITERIA.setdefault(n, {"name": name, "ok": True, "details": []})
    entry["ok"] &= rep.passed
    if rep.when == "call":
        entry["details"] += [str(v) for k, v in item.user_properties if k == "measured"]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        line = f"criterion {n:2d} {'PASS' if e['ok'] else 'FAIL'}: {e['name']}"
        if e["details"]:
            line += "  [" + "; ".join(e["details"]) + "]"
        terminalreporter.write_line(line)
