import numpy as np
import pytest

from reprsteer import kernels
from reprsteer.core import LMConfig, TransformBlockConfig, init_model, init_transform
from reprsteer.tokenizer import WordTokenizer

BACKENDS = ["numpy", "numba"] if kernels.HAVE_NUMBA else ["numpy"]

_ACCEPTANCE = []


@pytest.fixture(params=BACKENDS)
def backend(request):
    return request.param


@pytest.fixture
def tiny_tokenizer():
    return WordTokenizer("the cat dog sat ran on mat a big small red blue good bad".split())


def make_tiny_model(tokenizer, seed=0, hidden=16, layers=2, heads=2, max_positions=24, tied=False, locked=True):
    cfg = LMConfig(vocab_size=len(tokenizer), hidden_dim=hidden, n_layers=layers, n_heads=heads,
                   max_positions=max_positions, tie_embeddings=tied)
    model = init_model(cfg, tokenizer, seed=seed)
    # scale up so tiny random models produce non-degenerate distributions
    for name in model.params:
        if name.endswith("_w") or name in ("wte", "wpe", "head"):
            model.params[name] *= 10.0
    model.head_locked = locked
    return model


@pytest.fixture
def tiny_model(tiny_tokenizer):
    return make_tiny_model(tiny_tokenizer)


def random_transform(hidden, seed=0, num_blocks=2, activation="gelu", scale=0.3):
    """A transform with non-zero output weights (a fresh one is the identity)."""
    tau = init_transform(TransformBlockConfig(hidden, num_blocks=num_blocks, activation=activation, seed=seed))
    rng = np.random.default_rng(seed + 1000)
    for sub in tau.sub_blocks:
        sub["W_out"][...] = rng.normal(scale=scale, size=sub["W_out"].shape)
        sub["b_out"][...] = rng.normal(scale=scale, size=sub["b_out"].shape)
    return tau


@pytest.fixture(scope="session")
def toy_base():
    """Pretrained toy base model shared by slow end-to-end tests (about 30 s)."""
    from reprsteer.toy import pretrain_toy_lm

    model, _ = pretrain_toy_lm(seed=2)
    return model


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or rep.failed):
        return
    number, title = marker.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    _ACCEPTANCE.append((number, title, rep.outcome, detail))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    # one line per criterion; it passes only if every test behind it passed
    grouped = {}
    for number, title, outcome, detail in _ACCEPTANCE:
        entry = grouped.setdefault(number, {"title": title, "ok": True, "details": []})
        entry["ok"] &= outcome == "passed"
        if detail:
            entry["details"].append(detail)
    for number in sorted(grouped):
        entry = grouped[number]
        status = "PASS" if entry["ok"] else "FAIL"
        detail = "; ".join(entry["details"])
        terminalreporter.write_line(f"[{status}] criterion {number}: {entry['title']}"
                                    + (f" | {detail}" if detail else ""))
