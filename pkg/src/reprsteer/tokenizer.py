"""Whitespace word-level tokenizer used by the toy language models."""
import json
from pathlib import Path

from .errors import ConfigError, InputError


class WordTokenizer:
    """Maps whitespace-separated words to ids over a closed vocabulary.

    ``bos_token`` may equal ``eos_token`` (GPT-2 style end-of-text token that
    also opens a sequence).
    """

    def __init__(self, vocab, unk_token="<unk>", pad_token="<pad>", bos_token="<|endoftext|>",
                 eos_token="<|endoftext|>"):
        vocab = list(vocab)
        for tok in (pad_token, unk_token, bos_token, eos_token):
            if tok is not None and tok not in vocab:
                vocab.append(tok)
        if len(set(vocab)) != len(vocab):
            raise ConfigError("vocabulary contains duplicate entries")
        self.vocab = vocab
        self.index = {w: i for i, w in enumerate(vocab)}
        self.unk_token = unk_token
        self.pad_token = pad_token
        self.bos_token = bos_token
        self.eos_token = eos_token

    def __len__(self):
        return len(self.vocab)

    @property
    def vocab_size(self):
        return len(self.vocab)

    @property
    def pad_id(self):
        return None if self.pad_token is None else self.index[self.pad_token]

    @property
    def bos_id(self):
        return None if self.bos_token is None else self.index[self.bos_token]

    @property
    def eos_id(self):
        return None if self.eos_token is None else self.index[self.eos_token]

    @property
    def special_ids(self):
        return {self.index[t] for t in (self.pad_token, self.unk_token, self.bos_token, self.eos_token)
                if t is not None}

    def encode(self, text, add_bos=False):
        ids = [self.bos_id] if add_bos else []
        if add_bos and self.bos_id is None:
            raise ConfigError("tokenizer has no BOS token")
        for word in text.split():
            if word in self.index:
                ids.append(self.index[word])
            elif self.unk_token is not None:
                ids.append(self.index[self.unk_token])
            else:
                raise InputError(f"out-of-vocabulary word {word!r}")
        return ids

    def decode(self, ids, skip_special=True):
        special = self.special_ids if skip_special else set()
        return " ".join(self.vocab[i] for i in ids if i not in special)

    def to_dict(self):
        return {"vocab": self.vocab, "unk_token": self.unk_token, "pad_token": self.pad_token,
                "bos_token": self.bos_token, "eos_token": self.eos_token}

    @classmethod
    def from_dict(cls, d):
        return cls(d["vocab"], unk_token=d.get("unk_token"), pad_token=d.get("pad_token"),
                   bos_token=d.get("bos_token"), eos_token=d.get("eos_token"))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))
