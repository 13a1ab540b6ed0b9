import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from reprsteer.classifiers import FunctionClassifier, VowelFractionClassifier
from reprsteer.core import forward_hidden
from reprsteer.errors import BenchmarkAborted, ContractError, InputError
from reprsteer.evaluation import (EvalReport, attribute_probability, avg_max_attribute, compare_latency,
                                  compose_report, dist_n, format_delta, latency_benchmark, mean_perplexity,
                                  perplexity_details, recompute_report, render_latency_table,
                                  render_results_table, report_from_batches)
from reprsteer.generation import DecodeConfig, generate, read_generations, write_generations


# -- oracles -----------------------------------------------------------------

def oracle_avg_max(rows):
    return sum(max(r) for r in rows) / len(rows)


def oracle_probability(rows, thr):
    return sum(1 for r in rows if any(v > thr for v in r)) / len(rows)


def oracle_dist(seqs, n):
    grams = [tuple(s[i:i + n]) for s in seqs for i in range(len(s) - n + 1)]
    return len(set(grams)) / len(grams) if grams else 0.0


def oracle_perplexity(model, text):
    ids = [model.bos_id] + model.tokenizer.encode(text)
    h = forward_hidden(model, np.array([ids]))[0]
    nll = 0.0
    for t in range(len(ids) - 1):
        logits = h[t] @ model.head
        m = max(logits)
        logz = m + math.log(sum(math.exp(v - m) for v in logits))
        nll += logz - logits[ids[t + 1]]
    return math.exp(nll / (len(ids) - 1))


# -- attribute metrics --------------------------------------------------------

def test_worked_example():
    s = [[0.1, 0.9], [0.2, 0.3]]
    assert avg_max_attribute(s) == pytest.approx(0.6)
    assert attribute_probability(s) == 0.5
    assert attribute_probability([[0.5, 0.5]]) == 0.0  # strictly greater


def test_metrics_match_oracles_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(150):
        p, r = int(rng.integers(1, 12)), int(rng.integers(1, 30))
        s = rng.random((p, r))
        thr = float(rng.uniform(0.05, 0.95))
        assert avg_max_attribute(s) == pytest.approx(oracle_avg_max(s.tolist()), abs=1e-12)
        assert attribute_probability(s, thr) == pytest.approx(oracle_probability(s.tolist(), thr))


@pytest.mark.parametrize("bad", [[], [[]], [0.2, 0.3], [[0.1, 1.2]], [[np.nan, 0.1]], [[-0.1]]])
def test_score_matrix_validation(bad):
    with pytest.raises(InputError):
        avg_max_attribute(bad)


def test_threshold_validation():
    with pytest.raises(InputError):
        attribute_probability([[0.2]], threshold=1.0)


scores = arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.floats(0, 1))


@settings(max_examples=100, deadline=None)
@given(scores, st.randoms(use_true_random=False))
def test_metrics_invariant_to_permutation(s, rnd):
    rows = list(range(s.shape[0]))
    cols = list(range(s.shape[1]))
    rnd.shuffle(rows)
    rnd.shuffle(cols)
    t = s[rows][:, cols]
    assert avg_max_attribute(t) == pytest.approx(avg_max_attribute(s))
    assert attribute_probability(t) == attribute_probability(s)


@settings(max_examples=100, deadline=None)
@given(scores, st.data())
def test_metrics_monotone_in_scores(s, data):
    i = data.draw(st.integers(0, s.shape[0] - 1))
    j = data.draw(st.integers(0, s.shape[1] - 1))
    t = s.copy()
    t[i, j] = data.draw(st.floats(s[i, j], 1))
    assert avg_max_attribute(t) >= avg_max_attribute(s) - 1e-15
    assert attribute_probability(t) >= attribute_probability(s)


# -- dist-n -------------------------------------------------------------------

def test_dist_worked_examples():
    assert dist_n(["a b", "a b"], 1) == 0.5
    assert dist_n(["a b", "a b"], 2) == 0.5
    assert dist_n([[1, 2, 3, 1, 2]], 2) == 0.75
    assert dist_n([[1], [2]], 2) == 0.0


@pytest.mark.parametrize("backend", ["numpy", "numba"])
def test_dist_matches_oracle(backend):
    pytest.importorskip(backend)
    rng = np.random.default_rng(1)
    for _ in range(120):
        seqs = [rng.integers(0, int(rng.integers(2, 9)), size=int(rng.integers(0, 15))).tolist()
                for _ in range(int(rng.integers(1, 6)))]
        for n in (1, 2, 3):
            assert dist_n(seqs, n, backend=backend) == pytest.approx(oracle_dist(seqs, n))


def test_dist_rejects_bad_order():
    with pytest.raises(InputError):
        dist_n([[1, 2]], 0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.lists(st.integers(0, 5), max_size=12), min_size=1, max_size=5), st.integers(1, 3))
def test_dist_bounded_and_order_free(seqs, n):
    d = dist_n(seqs, n)
    assert 0 <= d <= 1
    assert d == pytest.approx(dist_n(seqs[::-1], n))


# -- perplexity ---------------------------------------------------------------

def test_uniform_scorer_perplexity_is_vocab_size(tiny_model):
    tiny_model.params["head"][:] = 0.0
    res = perplexity_details(tiny_model, ["the cat", "a big red dog"])
    assert res.per_text == pytest.approx([tiny_model.config.vocab_size] * 2)


class OneHotScorer:
    """Puts all mass on the true next token."""

    def __init__(self, tokenizer):
        self.tokenizer = tokenizer
        self.bos_id = tokenizer.bos_id

    def next_token_logprobs(self, ids):
        out = np.full((len(ids), len(self.tokenizer.vocab)), -np.inf)
        out[np.arange(len(ids) - 1), ids[1:]] = 0.0
        return out


def test_deterministic_scorer_perplexity_is_one(tiny_tokenizer):
    assert mean_perplexity(OneHotScorer(tiny_tokenizer), ["the cat sat", "a dog"]) == 1.0


def test_perplexity_matches_token_level_oracle(tiny_model):
    texts = ["the cat", "a big red dog ran", "the the the"]
    res = perplexity_details(tiny_model, texts)
    for got, text in zip(res.per_text, texts):
        assert got == pytest.approx(oracle_perplexity(tiny_model, text), rel=1e-10)
    assert res.mean == pytest.approx(np.mean([oracle_perplexity(tiny_model, t) for t in texts]))


def test_short_texts_skipped(tiny_model, caplog):
    res = perplexity_details(tiny_model, ["", "the cat"])
    assert res.skipped == 1 and len(res.per_text) == 1
    assert math.isnan(perplexity_details(tiny_model, [""]).mean)
    with pytest.raises(InputError):
        perplexity_details(tiny_model, [])


# -- latency ------------------------------------------------------------------

def test_latency_benchmark_counts_runs():
    calls = []
    res = latency_benchmark(lambda: calls.append(1), runs=7, warmup=2)
    assert len(calls) == 9 and res.runs == 7 and res.mean_seconds >= 0


def test_latency_benchmark_reports_partial_timings():
    calls = []

    def flaky():
        calls.append(1)
        if len(calls) == 5:
            raise RuntimeError("out of memory")

    with pytest.raises(BenchmarkAborted) as err:
        latency_benchmark(flaky, runs=10, warmup=1)
    assert len(err.value.timings) == 3


def test_compare_latency_and_table():
    out = compare_latency(lambda: None, lambda: sum(range(2000)), runs=5, warmup=0)
    assert out["runs"] == 5 and len(out["base_timings"]) == len(out["steered_timings"]) == 5
    assert out["delta_seconds"] == pytest.approx(out["steered_seconds"] - out["base_seconds"])
    assert format_delta(0.004) == "+0.00" and format_delta(0.01) == "+0.01" and format_delta(-0.02) == "-0.02"
    table = render_latency_table([("GPT-2", 0.5), ("CHRT", 0.504)])
    assert table.splitlines()[2].split()[-1] == "+0.00"


# -- reports ------------------------------------------------------------------

def _report(**kw):
    base = dict(avg_max_attribute=0.5, attribute_probability=0.4, mean_perplexity=20.0,
                dist_n={1: 0.5, 2: 0.8, 3: 0.9})
    base.update(kw)
    return EvalReport(**base)


@pytest.mark.parametrize("kw", [dict(dist_n={1: 1.7}), dict(avg_max_attribute=-0.1), dict(mean_perplexity=0.5),
                                dict(attribute_probability=float("nan")), dict(latency_seconds=-1.0)])
def test_report_rejects_out_of_range(kw):
    with pytest.raises(ContractError):
        _report(**kw)


def test_report_roundtrip(tmp_path):
    r = _report(latency_seconds=0.01, metadata={"seed": 3})
    again = EvalReport.load(r.save(tmp_path / "r.json"))
    assert again == r
    assert json.loads((tmp_path / "r.json").read_text())["dist_n"] == {"1": 0.5, "2": 0.8, "3": 0.9}
    assert "Perplexity" in render_results_table({"base": r, "CHRT_11": r})


def _batches(model):
    cfg = DecodeConfig(max_new_tokens=6, num_return=4, seed=0)
    return [generate(model, [], None, p, cfg) for p in ["the cat", "a dog", "big red"]]


def test_report_from_batches_matches_hand_computation(tiny_model):
    batches = _batches(tiny_model)
    clf = VowelFractionClassifier()
    rep = report_from_batches(batches, clf, tiny_model, latency_seconds=0.1)
    rows = [[clf.score(c.text) for c in b.continuations] for b in batches]
    assert rep.avg_max_attribute == pytest.approx(oracle_avg_max(rows))
    assert rep.attribute_probability == oracle_probability(rows, 0.5)
    assert rep.dist_n[2] == pytest.approx(np.mean([oracle_dist([c.token_ids for c in b.continuations], 2)
                                                   for b in batches]))
    assert rep.metadata["num_prompts"] == 3 and rep.metadata["num_return"] == 4


def test_recompute_report(tiny_model, tmp_path):
    clf = FunctionClassifier("len", lambda t: min(1.0, len(t) / 40))
    path = write_generations(tmp_path / "g.jsonl", _batches(tiny_model))
    rep = compose_report(read_generations(path), clf, tiny_model, latency_seconds=0.2)
    fresh, mismatches = recompute_report(EvalReport.load(rep.save(tmp_path / "r.json")), path, clf, tiny_model)
    assert mismatches == {} and fresh.latency_seconds == 0.2
    # a doctored generation file no longer reproduces the report
    lines = path.read_text().splitlines()
    rec = json.loads(lines[0])
    rec["text"] = rec["text"] + " zzzzzzzzzzzzzzzzzzzzzzzzzzzzzzzzzzzzzzzz"
    lines[0] = json.dumps(rec)
    path.write_text("\n".join(lines) + "\n")
    _, mismatches = recompute_report(rep, path, clf, tiny_model)
    assert "avg_max_attribute" in mismatches or "mean_perplexity" in mismatches


def test_compose_rejects_ragged_groups(tiny_model):
    g = [[{"text": "a", "token_ids": [1]}], [{"text": "a", "token_ids": [1]}] * 2]
    with pytest.raises(InputError):
        compose_report(g, VowelFractionClassifier(), tiny_model)
    with pytest.raises(InputError):
        compose_report([[]], VowelFractionClassifier(), tiny_model)


def test_permuting_prompts_keeps_report(tiny_model):
    groups = [b.records() for b in _batches(tiny_model)]
    groups = [list(g) for g in groups]
    clf = VowelFractionClassifier()
    ref = compose_report(groups, clf, tiny_model).metrics()
    for perm in itertools.permutations(groups):
        got = compose_report(list(perm), clf, tiny_model).metrics()
        for k in ("avg_max_attribute", "attribute_probability", "mean_perplexity"):
            assert got[k] == pytest.approx(ref[k])
