import numpy as np
import pytest

from lstmdrop.model import LstmState
from lstmdrop.training import TrainConfig, init_params


@pytest.fixture
def rng():
    return np.random.default_rng(20141108)


@pytest.fixture
def tiny_model():
    """2 layers, n=8, V=12, weights in [-0.5, 0.5] and non-zero biases."""
    r = np.random.default_rng(3)
    params = init_params(TrainConfig(n=8, L=2, init_range=0.5, seed=3), 12)
    for layer in params.layers:
        layer.b.data[:] = r.uniform(-0.5, 0.5, layer.b.shape)
    params.output_b.data[:] = r.uniform(-0.5, 0.5, params.output_b.shape)
    return params


def random_state(rng, L, B, n, scale=0.5):
    st = LstmState.zeros(L, B, n)
    for t in st.h + st.c:
        t.data[:] = rng.uniform(-scale, scale, t.shape)
    return st


@pytest.fixture(scope="session")
def copy_model():
    """Small model trained on the binary copy task; vocabulary has exactly 5 tokens."""
    from lstmdrop.data import Corpus, Vocabulary, concat_pairs, copy_task_lines
    from lstmdrop.training import train

    src, tgt = copy_task_lines(300, alphabet=2, max_len=3, seed=0)
    vocab = Vocabulary.build(src + tgt, translation=True)
    ids = concat_pairs(src, tgt, vocab)
    cfg = TrainConfig(n=16, L=2, unroll=10, batch_size=8, init_range=0.1, epochs=6,
                      decay_start=4, decay_factor=1.5, seed=1)
    params, _ = train(cfg, Corpus(vocab, ids))
    return params, vocab


# ------------------------------------------------ acceptance summary lines

_CRITERIA = {}


def pytest_runtest_logreport(report):
    info = getattr(report, "_criterion", None)
    if info is None:
        return
    number, title = info
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        outcome = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        detail = dict(report.user_properties).get("detail", "")
        if report.skipped and isinstance(report.longrepr, tuple):
            detail = report.longrepr[2].removeprefix("Skipped: ")
        rows = _CRITERIA.setdefault(number, [])
        rows.append((title, outcome, detail))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result()._criterion = tuple(marker.args)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        for title, outcome, detail in _CRITERIA[number]:
            line = f"criterion {number:>2} {outcome}  {title}"
            tr.write_line(line + (f"  ({detail})" if detail else ""))
