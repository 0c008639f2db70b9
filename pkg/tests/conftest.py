import numpy as np
import pytest

from relcap import data, model
from relcap.config import RunConfig


def small_config(seed: int = 0) -> RunConfig:
    cfg = RunConfig(seed=seed)
    cfg.data.n_train, cfg.data.n_val = 40, 20
    for name in ("q_embed", "q_hidden", "v_hidden", "word_embed", "cap_hidden", "dec_embed", "dec_hidden",
                 "att_hidden"):
        setattr(cfg.model, name, 8)
    cfg.data.min_word_count = 1
    return cfg


@pytest.fixture
def tiny_dataset():
    """(config, val records, vocab, answers, random params) at small dims."""
    cfg = small_config()
    recs = data.generate_dataset(cfg.data, cfg.seed)
    vocab, answers = data.build_vocabs(data.split(recs, "train"), cfg.data.min_word_count)
    params = model.init_params(cfg.model, len(vocab), len(answers), cfg.data.feature_dim, cfg.seed)
    return cfg, data.split(recs, "val"), vocab, answers, params


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# ------------------------------------------------------------- acceptance

_ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): numbered acceptance check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        number, title = marker.args
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        item.config.stash.setdefault(_ACCEPTANCE, {})[number] = (title, rep.outcome, detail)


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance")
    for number in sorted(results):
        title, outcome, detail = results[number]
        verdict = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"[{number}] {verdict} {title}" + (f" | {detail}" if detail else ""))
