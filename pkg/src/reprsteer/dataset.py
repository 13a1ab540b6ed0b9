"""Balanced, classifier-labelled prompt/continuation datasets built from a raw corpus.

A corpus is streamed in order; sentences outside the length window or not
identified as English are skipped; the rest are accepted into the positive
or negative pool when the classifier is confidently on one side. Each
accepted sentence is then split into a prompt and a continuation, and all
three pieces are scored.
"""
import gzip
import hashlib
import json
import logging
import re
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError, PartialResultError
from .generation import DecodeConfig, generate

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DatasetBuildConfig:
    n: int
    theta: float = 0.9
    min_len: int = 64
    max_len: int = 1024
    length_unit: str = "characters"

    def __post_init__(self):
        if not 0.5 < self.theta <= 1:
            raise ConfigError("theta must lie in (0.5, 1]")
        if self.n < 0 or self.n % 2:
            raise ConfigError("n must be a non-negative even integer")
        if self.length_unit != "characters":
            raise ConfigError("only character lengths are supported")
        if self.min_len > self.max_len:
            raise ConfigError("min_len > max_len")


@dataclass(frozen=True)
class PromptRecord:
    prompt: str
    prompt_score: float
    continuation: str
    continuation_score: float
    full_text: str
    full_score: float
    class_label: str

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# corpus streaming
# ---------------------------------------------------------------------------

def stream_corpus(source, offset=0):
    """Yield sentences (one per line) from a text/.gz file or an iterable, from ``offset`` on."""
    if isinstance(source, (str, Path)):
        path = Path(source)
        if not path.is_file():
            raise OSError(f"cannot read corpus {path}")
        opener = gzip.open if path.suffix == ".gz" else open
        with opener(path, "rt", encoding="utf-8") as fh:
            for i, line in enumerate(fh):
                if i >= offset:
                    yield line.rstrip("\n")
        return
    for i, sentence in enumerate(source):
        if i >= offset:
            yield sentence


def corpus_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# language identification
# ---------------------------------------------------------------------------

_EN_FUNCTION_WORDS = frozenset("""
a about above after again against all am an and any are as at be because been before being below
between both but by can could did do does doing down during each few for from further had has have
having he her here hers him his how i if in into is it its itself just me more most my no nor not
now of off on once only or other our out over own same she should so some such than that the their
them then there these they this those through to too under until up very was we were what when where
which while who whom why will with would you your
""".split())
_WORD = re.compile(r"[^\W\d_]+", re.UNICODE)


class StopwordLanguageID:
    """Lightweight English detector based on function-word density and ASCII letters.

    ``predict`` returns ``(label, confidence)``; a text is English when the
    label is ``"en"`` and confidence reaches ``threshold``.
    """

    def __init__(self, threshold=0.5, saturation=0.25):
        self.threshold = threshold
        self.saturation = saturation

    def predict(self, text):
        words = _WORD.findall(text.lower())
        if not words:
            return "unk", 0.0
        letters = [c for w in words for c in w]
        ascii_ratio = sum(c.isascii() for c in letters) / len(letters)
        density = sum(w in _EN_FUNCTION_WORDS for w in words) / len(words)
        conf = min(1.0, density / self.saturation) * ascii_ratio
        return ("en" if conf >= self.threshold else "other"), conf

    def is_english(self, text):
        label, conf = self.predict(text)
        return label == "en" and conf >= self.threshold


_DEFAULT_LID = StopwordLanguageID()


def language_filter(text, identifier=None):
    """True iff ``identifier`` (default: :class:`StopwordLanguageID`) labels ``text`` English."""
    if not text or not text.strip():
        return False
    identifier = identifier or _DEFAULT_LID
    try:
        return bool(identifier.is_english(text))
    except Exception:
        log.exception("language identification failed; treating text as non-English")
        return False


# ---------------------------------------------------------------------------
# dataset construction
# ---------------------------------------------------------------------------

def split_halves(sentence):
    """Split near the character midpoint, snapping left to whitespace when possible.

    ``prompt + continuation == sentence`` always holds.
    """
    if len(sentence) < 2:
        raise InputError("sentence must have at least two characters")
    mid = len(sentence) // 2
    cut = mid
    for i in range(mid, 0, -1):
        if sentence[i].isspace():
            cut = i
            break
    return sentence[:cut], sentence[cut:]


def _record(sentence, label, classifier, full_score):
    p, c = split_halves(sentence)
    return PromptRecord(prompt=p, prompt_score=classifier.score(p), continuation=c,
                        continuation_score=classifier.score(c), full_text=sentence,
                        full_score=full_score, class_label=label)


def build_dataset(stream, classifier, config, is_english=None):
    """Collect ``n/2`` confidently-positive and ``n/2`` confidently-negative sentences.

    Positive records come first, then negative ones, each in stream order.
    Raises :class:`PartialResultError` (carrying both partial pools) if the
    stream runs dry first.
    """
    if config.n == 0:
        return []
    is_english = is_english or language_filter
    half = config.n // 2
    pos, neg = [], []
    for sentence in stream:
        if not config.min_len <= len(sentence) <= config.max_len or not is_english(sentence):
            continue
        score = classifier.score(sentence)
        if score >= config.theta and len(pos) < half:
            pos.append((sentence, score))
        if score <= 1 - config.theta and len(neg) < half:
            neg.append((sentence, score))
        if len(pos) == half and len(neg) == half:
            break
    else:
        raise PartialResultError(
            f"stream exhausted with {len(pos)}/{half} positive and {len(neg)}/{half} negative sentences",
            [s for s, _ in pos], [s for s, _ in neg])
    return ([_record(s, "positive", classifier, sc) for s, sc in pos]
            + [_record(s, "negative", classifier, sc) for s, sc in neg])


def write_dataset(path, records, manifest=None):
    """Write records as JSONL plus a ``<name>.manifest.json`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True, ensure_ascii=False) + "\n")
    side = dict(manifest or {})
    side["counts"] = {"positive": sum(r.class_label == "positive" for r in records),
                      "negative": sum(r.class_label == "negative" for r in records)}
    side["output_sha256"] = corpus_hash(path)
    manifest_path = path.with_name(path.stem + ".manifest.json")
    manifest_path.write_text(json.dumps(side, indent=2, sort_keys=True))
    return path, manifest_path


def read_dataset(path):
    return [PromptRecord(**json.loads(line)) for line in Path(path).read_text(encoding="utf-8").splitlines()
            if line.strip()]


# ---------------------------------------------------------------------------
# evaluation prompt selection
# ---------------------------------------------------------------------------

def prompt_adversity(prompts, base, classifier, config=None, threshold=0.5):
    """Per prompt: (fraction of base continuations scoring above ``threshold``, mean score)."""
    config = config or DecodeConfig()
    stats = []
    for prompt in prompts:
        batch = generate(base, [], None, prompt, config)
        scores = classifier.score_batch([c.text for c in batch.continuations])
        stats.append((float(np.mean(scores > threshold)), float(scores.mean())))
    return stats


def select_eval_prompts(prompts, base, classifier, k, config=None, threshold=0.5):
    """The ``k`` prompts whose base-model continuations most often exceed ``threshold``.

    Ties are broken by mean score, then by input order.
    """
    prompts = list(prompts)
    if k < 0 or k > len(prompts):
        raise InputError(f"k={k} outside [0, {len(prompts)}]")
    if k == 0:
        return []
    stats = prompt_adversity(prompts, base, classifier, config, threshold)
    order = sorted(range(len(prompts)), key=lambda i: (-stats[i][0], -stats[i][1], i))
    return [prompts[i] for i in order[:k]]
