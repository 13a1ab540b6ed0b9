"""Synthetic two-attribute language world for desk-scale experiments.

Every sentence mixes neutral filler with words from two independent
attributes. Within a sentence all words of one attribute share a class, so
a language model learns to continue in whatever class the context shows.
"""
from dataclasses import dataclass

import numpy as np

from .classifiers import LexiconClassifier
from .core.lm import LMConfig, init_model
from .errors import ConfigError
from .tokenizer import WordTokenizer
from .training import FinetuneConfig, train_causal_lm

NEUTRAL = ("the a cat dog bird man woman child sat ran walked looked at on in near park house "
           "garden street and then it was is very day we saw today").split()

ATTRIBUTES = {
    # attribute -> (target class words, opposite class words)
    "sentiment": ("good great happy lovely kind bright warm calm".split(),
                  "bad awful sad nasty cruel dark cold angry".split()),
    "simplicity": ("fun easy nice play sun cup toy hop".split(),
                   "ubiquitous paradigm esoteric obfuscate heuristic ontology synergy quintessential".split()),
}
ATTRIBUTE_RATE = {"sentiment": 0.3, "simplicity": 0.2}


def toy_vocab():
    words = list(NEUTRAL)
    for pos, neg in ATTRIBUTES.values():
        words += pos + neg
    return words


def toy_tokenizer():
    return WordTokenizer(toy_vocab())


def toy_classifier(attribute):
    if attribute not in ATTRIBUTES:
        raise ConfigError(f"unknown toy attribute {attribute!r}")
    pos, neg = ATTRIBUTES[attribute]
    return LexiconClassifier(f"toy_{attribute}", pos, neg)


def make_sentence(rng, classes, min_len=8, max_len=14):
    """``classes`` maps attribute -> 0 (target words) or 1 (opposite words)."""
    length = int(rng.integers(min_len, max_len + 1))
    words = []
    for _ in range(length):
        u = rng.random()
        acc = 0.0
        for attr, rate in ATTRIBUTE_RATE.items():
            acc += rate
            if u < acc:
                words.append(str(rng.choice(ATTRIBUTES[attr][classes[attr]])))
                break
        else:
            words.append(str(rng.choice(NEUTRAL)))
    return " ".join(words)


def make_corpus(n, seed, fixed=None):
    """``n`` sentences; attributes not pinned in ``fixed`` get a random class per sentence."""
    rng = np.random.default_rng(seed)
    fixed = fixed or {}
    out = []
    for _ in range(n):
        classes = {a: fixed.get(a, int(rng.integers(0, 2))) for a in ATTRIBUTES}
        out.append(make_sentence(rng, classes))
    return out


def attribute_corpora(attribute, n, seed):
    """(positive, negative) sentence lists for guider fine-tuning."""
    pos = make_corpus(n, seed, {attribute: 0})
    neg = make_corpus(n, seed + 1, {attribute: 1})
    return pos, neg


def encode_corpus(tokenizer, sentences):
    """Each sentence becomes ``[BOS] + words``; concatenation yields BOS-separated text."""
    return [tokenizer.encode(s, add_bos=True) for s in sentences]


@dataclass
class ToySettings:
    hidden_dim: int = 32
    n_layers: int = 2
    n_heads: int = 2
    max_positions: int = 48
    corpus_size: int = 3000
    epochs: int = 12
    learning_rate: float = 3e-3
    batch_size: int = 16
    tie_embeddings: bool = False


def pretrain_toy_lm(seed=0, settings=None):
    """Train the toy base LM on a balanced mixed corpus; returns a head-locked bundle."""
    settings = settings or ToySettings()
    tok = toy_tokenizer()
    cfg = LMConfig(vocab_size=len(tok), hidden_dim=settings.hidden_dim, n_layers=settings.n_layers,
                   n_heads=settings.n_heads, max_positions=settings.max_positions,
                   tie_embeddings=settings.tie_embeddings)
    model = init_model(cfg, tok, seed=seed)
    corpus = encode_corpus(tok, make_corpus(settings.corpus_size, seed=10_000 + seed))
    ft = FinetuneConfig(epochs=settings.epochs, batch_size=settings.batch_size,
                        learning_rate=settings.learning_rate, block_size=settings.max_positions, seed=seed)
    model, history = train_causal_lm(model, corpus, ft)
    model.head_locked = True
    return model, history
