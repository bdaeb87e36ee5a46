import numpy as np
import pytest

from treerpo.policy import PolicyConfig, PolicyModel, Vocabulary


def make_model(V=6, max_len=12, seed=0, gain=1.5, **kw):
    vocab = Vocabulary.toy(V)
    cfg = PolicyConfig(vocab_size=V, max_len=max_len, d_model=8, n_layers=2, n_heads=2,
                       d_hidden=16, out_gain_init=gain, seed=seed, **kw)
    return PolicyModel(cfg, vocab)


@pytest.fixture
def toy_model():
    return make_model()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ----------------------------------------------------------------------
# acceptance reporting: tests marked ``criterion(n)`` roll up into one line
# per criterion at the end of the run

_CRITERIA = {}
_DETAILS = {}


@pytest.fixture
def detail(request):
    """Record a short measurement string next to the test's criterion line."""
    n = request.node.get_closest_marker("criterion").args[0]

    def add(text):
        _DETAILS.setdefault(n, []).append(text)

    return add


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n = mark.args[0]
    if rep.when == "call" or rep.failed:
        prev = _CRITERIA.get(n, True)
        _CRITERIA[n] = prev and rep.passed if rep.when == "call" else False


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        info = "; ".join(_DETAILS.get(n, []))
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if _CRITERIA[n] else 'FAIL'}  {info}".rstrip())
