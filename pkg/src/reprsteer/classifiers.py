"""Pluggable attribute classifiers returning scores in [0, 1]."""
import importlib
import json
from pathlib import Path

import numpy as np

from .errors import ConfigError


class AttributeClassifier:
    """Base class: subclasses implement ``_raw_score``; outputs are clamped to [0, 1]."""

    name = "classifier"

    def _raw_score(self, text):
        raise NotImplementedError

    def score(self, text):
        s = float(self._raw_score(text))
        if not np.isfinite(s):
            raise ValueError(f"{self.name}: non-finite score for {text!r}")
        return min(1.0, max(0.0, s))

    def score_batch(self, texts):
        return np.array([self.score(t) for t in texts], dtype=np.float64)

    __call__ = score


class FunctionClassifier(AttributeClassifier):
    def __init__(self, name, fn):
        self.name = name
        self._fn = fn

    def _raw_score(self, text):
        return self._fn(text)


class VowelFractionClassifier(AttributeClassifier):
    """Fraction of alphabetic characters that are vowels (0.5 for text without letters)."""

    name = "vowel_fraction"

    def _raw_score(self, text):
        letters = [c for c in text.lower() if c.isalpha()]
        if not letters:
            return 0.5
        return sum(c in "aeiou" for c in letters) / len(letters)


class LexiconClassifier(AttributeClassifier):
    """Share of attribute words that belong to the positive list; 0.5 when none occur."""

    def __init__(self, name, positive, negative):
        self.name = name
        self.positive = frozenset(positive)
        self.negative = frozenset(negative)

    def _raw_score(self, text):
        words = text.split()
        pos = sum(w in self.positive for w in words)
        neg = sum(w in self.negative for w in words)
        if pos + neg == 0:
            return 0.5
        return pos / (pos + neg)

    def to_dict(self):
        return {"name": self.name, "positive": sorted(self.positive), "negative": sorted(self.negative)}


def load_classifier(locator):
    """Resolve a classifier locator.

    ``vowel``, ``toy:<attribute>``, ``lexicon:<json path>`` or
    ``python:<module>:<attribute>`` (attribute may be a class or factory).
    """
    kind, _, rest = locator.partition(":")
    if kind == "vowel":
        return VowelFractionClassifier()
    if kind == "toy":
        from .toy import toy_classifier
        return toy_classifier(rest)
    if kind == "lexicon":
        d = json.loads(Path(rest).read_text())
        return LexiconClassifier(d["name"], d["positive"], d["negative"])
    if kind == "python":
        module, _, attr = rest.partition(":")
        obj = getattr(importlib.import_module(module), attr)
        return obj() if callable(obj) and not isinstance(obj, AttributeClassifier) else obj
    raise ConfigError(f"unknown classifier locator {locator!r}")


def classifier_exists(locator):
    kind, _, rest = locator.partition(":")
    if kind == "lexicon":
        return Path(rest).is_file()
    if kind == "toy":
        from .toy import ATTRIBUTES
        return rest in ATTRIBUTES
    if kind == "python":
        module, _, attr = rest.partition(":")
        try:
            return hasattr(importlib.import_module(module), attr)
        except ImportError:
            return False
    return kind == "vowel"
