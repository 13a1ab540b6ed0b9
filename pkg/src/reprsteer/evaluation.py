"""Generation metrics, latency measurement and persistent evaluation reports."""
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .core.lm import next_token_logprobs
from .errors import BenchmarkAborted, ContractError, InputError
from .generation import read_generations

log = logging.getLogger(__name__)

DIST_ORDERS = (1, 2, 3)


# ---------------------------------------------------------------------------
# attribute metrics
# ---------------------------------------------------------------------------

def _score_matrix(scores):
    m = np.asarray(scores, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise InputError("score matrix must be a non-empty [prompts, returns] matrix")
    if not np.all(np.isfinite(m)) or m.min() < 0 or m.max() > 1:
        raise InputError("scores must be finite and lie in [0, 1]")
    return m


def avg_max_attribute(scores):
    """Mean over prompts of the highest continuation score."""
    return float(_score_matrix(scores).max(axis=1).mean())


def attribute_probability(scores, threshold=0.5):
    """Fraction of prompts with at least one continuation scoring strictly above ``threshold``."""
    if not 0 < threshold < 1:
        raise InputError("threshold must lie in (0, 1)")
    return float((_score_matrix(scores) > threshold).any(axis=1).mean())


# ---------------------------------------------------------------------------
# perplexity
# ---------------------------------------------------------------------------

@dataclass
class PerplexityResult:
    mean: float
    per_text: list
    skipped: int


def _scorer_ids(scorer, text):
    ids = scorer.tokenizer.encode(text)
    bos = getattr(scorer, "bos_id", None)
    return ([bos] + ids) if bos is not None else ids


def _token_logprobs(scorer, ids):
    """Log-probability of each token after the first."""
    fn = getattr(scorer, "next_token_logprobs", None)
    lp = fn(ids) if fn is not None else next_token_logprobs(scorer, ids)
    ids = np.asarray(ids)
    return lp[np.arange(len(ids) - 1), ids[1:]]


def perplexity_details(scorer, texts):
    """Per-text perplexities, their mean, and how many texts were too short to score.

    Texts are scored after the scorer's BOS token when it has one; a text
    needs at least two tokens in total.
    """
    texts = list(texts)
    if not texts:
        raise InputError("no texts to score")
    values, skipped = [], 0
    for text in texts:
        ids = _scorer_ids(scorer, text)
        if len(ids) < 2:
            skipped += 1
            continue
        values.append(float(math.exp(-float(np.mean(_token_logprobs(scorer, ids))))))
    if skipped:
        log.warning("skipped %d text(s) with fewer than 2 tokens", skipped)
    mean = float(np.mean(values)) if values else float("nan")
    return PerplexityResult(mean, values, skipped)


def mean_perplexity(scorer, texts):
    return perplexity_details(scorer, texts).mean


# ---------------------------------------------------------------------------
# diversity
# ---------------------------------------------------------------------------

def _as_id_sequences(generations):
    seqs = list(generations)
    if seqs and all(isinstance(s, str) for s in seqs):
        vocab = {}
        seqs = [[vocab.setdefault(w, len(vocab)) for w in s.split()] for s in seqs]
    return [np.asarray(s, dtype=np.int64) for s in seqs]


def dist_n(generations, n, backend=None):
    """Distinct n-grams over total n-grams, pooled across ``generations``.

    Accepts token-id sequences or strings (split on whitespace). N-grams
    never span two sequences.
    """
    if n < 1:
        raise InputError("n must be >= 1")
    seqs = _as_id_sequences(generations)
    lengths = [len(s) for s in seqs]
    if not any(L >= n for L in lengths):
        log.warning("no sequence has %d or more tokens; dist-%d is 0", n, n)
        return 0.0
    flat = np.concatenate(seqs) if seqs else np.zeros(0, dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
    count = kernels.BACKENDS[backend]["count_ngrams"] if backend else kernels.count_ngrams
    distinct, total = count(flat, offsets, int(n))
    return distinct / total


# ---------------------------------------------------------------------------
# latency
# ---------------------------------------------------------------------------

@dataclass
class LatencyResult:
    mean_seconds: float
    timings: list

    @property
    def runs(self):
        return len(self.timings)


def latency_benchmark(generate_fn, runs=100, warmup=3):
    """Mean wall-clock seconds of ``generate_fn()`` over ``runs`` timed calls after ``warmup`` untimed ones."""
    if runs < 1 or warmup < 0:
        raise InputError("runs must be >= 1 and warmup >= 0")
    timings = []
    try:
        for _ in range(warmup):
            generate_fn()
        for _ in range(runs):
            t0 = time.perf_counter()
            generate_fn()
            timings.append(time.perf_counter() - t0)
    except Exception as exc:
        raise BenchmarkAborted(f"generation failed after {len(timings)} timed run(s): {exc}", timings) from exc
    return LatencyResult(float(np.mean(timings)), timings)


def format_delta(seconds):
    return f"{seconds:+.2f}"


def compare_latency(base_fn, steered_fn, runs=100, warmup=3):
    """Time base and steered generation with interleaved runs so both see the same machine state."""
    if runs < 1 or warmup < 0:
        raise InputError("runs must be >= 1 and warmup >= 0")
    base_t, steer_t = [], []
    try:
        for _ in range(warmup):
            base_fn()
            steered_fn()
        for _ in range(runs):
            for fn, sink in ((base_fn, base_t), (steered_fn, steer_t)):
                t0 = time.perf_counter()
                fn()
                sink.append(time.perf_counter() - t0)
    except Exception as exc:
        raise BenchmarkAborted(f"generation failed during latency comparison: {exc}",
                               {"base": base_t, "steered": steer_t}) from exc
    base, steered = float(np.mean(base_t)), float(np.mean(steer_t))
    return {"base_seconds": base, "steered_seconds": steered, "delta_seconds": steered - base,
            "relative_overhead": (steered - base) / base, "runs": runs,
            "base_timings": base_t, "steered_timings": steer_t}


def render_latency_table(rows):
    """``rows``: list of (name, seconds); the first row is the reference for the delta column."""
    if not rows:
        raise InputError("no latency rows")
    ref = rows[0][1]
    width = max(len("Model"), *(len(name) for name, _ in rows))
    lines = [f"{'Model':<{width}}  {'Time (s)':>9}  {'Delta':>6}"]
    for name, sec in rows:
        delta = "" if name == rows[0][0] else format_delta(sec - ref)
        lines.append(f"{name:<{width}}  {sec:>9.3f}  {delta:>6}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    avg_max_attribute: float
    attribute_probability: float
    mean_perplexity: float
    dist_n: dict
    latency_seconds: float = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.dist_n = {int(k): float(v) for k, v in self.dist_n.items()}
        self.validate()

    def validate(self):
        for name in ("avg_max_attribute", "attribute_probability"):
            v = getattr(self, name)
            if not (np.isfinite(v) and 0 <= v <= 1):
                raise ContractError(f"{name}={v} outside [0, 1]")
        for n, v in self.dist_n.items():
            if not (np.isfinite(v) and 0 <= v <= 1):
                raise ContractError(f"dist-{n}={v} outside [0, 1]")
        if not (self.mean_perplexity >= 1 or np.isnan(self.mean_perplexity)):
            raise ContractError(f"perplexity {self.mean_perplexity} below 1")
        if self.latency_seconds is not None and not self.latency_seconds >= 0:
            raise ContractError("latency must be non-negative")

    def to_dict(self):
        return {"avg_max_attribute": self.avg_max_attribute,
                "attribute_probability": self.attribute_probability,
                "mean_perplexity": self.mean_perplexity,
                "dist_n": {str(k): v for k, v in sorted(self.dist_n.items())},
                "latency_seconds": self.latency_seconds,
                "metadata": self.metadata}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def metrics(self):
        return {k: v for k, v in self.to_dict().items() if k != "metadata"}


def compose_report(groups, classifier, scorer, latency_seconds=None, threshold=0.5, metadata=None):
    """Compute every metric from one generation set.

    ``groups`` is a list of per-prompt continuation lists; each continuation
    is a dict holding at least ``text`` and ``token_ids`` (the format of
    generation files). Dist-n is pooled per prompt and averaged over prompts.
    """
    groups = [list(g) for g in groups]
    if not groups or any(not g for g in groups):
        raise InputError("every prompt needs at least one continuation")
    widths = {len(g) for g in groups}
    if len(widths) != 1:
        raise InputError(f"ragged continuation counts {sorted(widths)}")
    scores = np.array([classifier.score_batch([c["text"] for c in g]) for g in groups])
    ppl = perplexity_details(scorer, [c["text"] for g in groups for c in g])
    dist = {n: float(np.mean([dist_n([c["token_ids"] for c in g], n) for g in groups])) for n in DIST_ORDERS}
    meta = dict(metadata or {})
    meta.update({"num_prompts": len(groups), "num_return": widths.pop(), "threshold": threshold,
                 "classifier": getattr(classifier, "name", type(classifier).__name__),
                 "perplexity_skipped": ppl.skipped})
    return EvalReport(avg_max_attribute=avg_max_attribute(scores),
                      attribute_probability=attribute_probability(scores, threshold),
                      mean_perplexity=ppl.mean, dist_n=dist,
                      latency_seconds=latency_seconds, metadata=meta)


def report_from_batches(batches, classifier, scorer, latency_seconds=None, threshold=0.5, metadata=None):
    groups = [list(b.records()) for b in batches]
    return compose_report(groups, classifier, scorer, latency_seconds, threshold, metadata)


def recompute_report(report, generation_path, classifier, scorer):
    """Rebuild ``report`` from its generation file and return the fields that differ.

    Latency is a measurement rather than a function of the file, so it is
    carried over from the stored report.
    """
    fresh = compose_report(read_generations(generation_path), classifier, scorer,
                           latency_seconds=report.latency_seconds,
                           threshold=report.metadata.get("threshold", 0.5),
                           metadata=report.metadata)
    mismatches = {}
    for key, want in report.metrics().items():
        got = fresh.metrics()[key]
        if not _same(want, got):
            mismatches[key] = (want, got)
    return fresh, mismatches


def _same(a, b):
    if isinstance(a, dict):
        return a.keys() == b.keys() and all(_same(a[k], b[k]) for k in a)
    if isinstance(a, float) and isinstance(b, float) and np.isnan(a) and np.isnan(b):
        return True
    return a == b


def render_results_table(reports):
    """Aligned text table, one row per named report."""
    cols = ["Avg. Max. Attr.", "Attr. Prob.", "Perplexity", "Dist-1", "Dist-2", "Dist-3"]
    width = max(len("Model"), *(len(name) for name in reports))
    lines = [f"{'Model':<{width}}  " + "  ".join(f"{c:>15}" for c in cols)]
    for name, r in reports.items():
        vals = [r.avg_max_attribute, r.attribute_probability, r.mean_perplexity,
                r.dist_n.get(1, float("nan")), r.dist_n.get(2, float("nan")), r.dist_n.get(3, float("nan"))]
        lines.append(f"{name:<{width}}  " + "  ".join(f"{v:>15.3f}" for v in vals))
    return "\n".join(lines)


def attribute_sweep(base, taus, classifiers, alphas, config, n_sequences):
    """Mean score of each classifier on unprompted samples for every weight vector in ``alphas``."""
    from .generation import generate_unprompted

    points = []
    for alpha in alphas:
        batches = generate_unprompted(base, taus, alpha, config, n_sequences)
        texts = [c.text for b in batches for c in b.continuations]
        points.append({"alpha": [float(a) for a in alpha],
                       "scores": [float(clf.score_batch(texts).mean()) for clf in classifiers]})
    return points
