import pytest
import torch

from prompthoi.pretrain import pretrain_dual_encoder
from prompthoi.synth import generate_corpus, toy_label_space


@pytest.fixture(scope="session")
def space():
    return toy_label_space()


@pytest.fixture(scope="session")
def small_corpus(space):
    return generate_corpus(400, space, seed=11)


@pytest.fixture(scope="session")
def held_out(space):
    return generate_corpus(200, space, seed=12)


@pytest.fixture(scope="session")
def dual_encoder(small_corpus):
    torch.set_num_threads(1)
    return pretrain_dual_encoder(small_corpus, dim=64, steps=300, seed=0)


# ---------------------------------------------------------------- acceptance summary

_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = dict(item.user_properties).get("detail", "")
        verdict = dict(item.user_properties).get("verdict", "PASS" if report.passed else "FAIL")
        if not report.passed:
            verdict = "FAIL"
        _CRITERIA[number] = (title, verdict, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, verdict, detail = _CRITERIA[number]
        line = f"criterion {number:>2} {title}: {verdict}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))
