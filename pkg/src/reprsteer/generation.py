"""Nucleus-sampling decoder that routes hidden states through learned transforms."""
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .core.lm import decode_step, prefill
from .core.transform import CompiledCombination
from .errors import ConfigError, ContractError, InputError, NumericError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DecodeConfig:
    top_p: float = 0.8
    repetition_penalty: float = 1.2
    max_new_tokens: int = 25
    num_return: int = 25
    seed: int = 0
    stop_at_eos: bool = True

    def __post_init__(self):
        if not 0 < self.top_p <= 1:
            raise ConfigError(f"top_p must lie in (0, 1], got {self.top_p}")
        if self.repetition_penalty < 1:
            raise ConfigError("repetition_penalty must be >= 1")
        if self.max_new_tokens < 1 or self.num_return < 1:
            raise ConfigError("max_new_tokens and num_return must be >= 1")

    def to_dict(self):
        return asdict(self)


@dataclass
class Continuation:
    token_ids: list
    text: str
    seed: list


@dataclass
class GenerationBatch:
    prompt: str
    continuations: list
    config_snapshot: DecodeConfig
    alpha_snapshot: tuple = field(default_factory=tuple)

    def records(self):
        for i, c in enumerate(self.continuations):
            yield {"prompt": self.prompt, "continuation_index": i, "text": c.text,
                   "token_ids": list(c.token_ids), "seed": list(c.seed),
                   "alpha": list(self.alpha_snapshot), "config": self.config_snapshot.to_dict()}


def nucleus_filter(probs, top_p):
    """Keep the smallest highest-probability prefix with mass >= ``top_p`` and renormalise.

    Ties are ordered by token id so the kept set is deterministic.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1 or np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-6:
        raise InputError("probs must be a non-negative vector summing to 1")
    if not 0 < top_p <= 1:
        raise InputError("top_p must lie in (0, 1]")
    return kernels.nucleus_filter(probs, float(top_p))


def apply_repetition_penalty(logits, prior_tokens, r):
    """CTRL-style damping: positive logits of seen tokens are divided by ``r``, others multiplied."""
    if r < 1:
        raise InputError("repetition penalty must be >= 1")
    logits = np.asarray(logits, dtype=np.float64)
    seen = np.zeros(logits.shape[0], dtype=bool)
    prior = list(prior_tokens)
    if prior:
        seen[np.asarray(prior, dtype=np.int64)] = True
    return kernels.repetition_penalty(logits, seen, float(r))


def _lane_seed(seed, index):
    return [int(seed), int(index)]


def _prompt_ids(model, prompt):
    ids = model.tokenizer.encode(prompt)
    bos = model.bos_id
    if bos is not None:
        ids = [bos] + ids
    elif not ids:
        raise ConfigError("empty prompt needs a tokenizer with a BOS token")
    return ids


def _decode_lanes(model, transform, prompt_ids, seeds, config, sample=None):
    """Sample one continuation per lane; ``seeds`` gives each lane its RNG seed."""
    if not model.head_locked:
        raise ContractError("LM head must be locked at inference")
    sample = sample or kernels.sample_token
    max_len = model.config.max_positions
    room = max_len - config.max_new_tokens
    if room < 1:
        raise ConfigError("max_new_tokens leaves no room for the prompt")
    if len(prompt_ids) > room:
        log.warning("prompt truncated from %d to %d tokens", len(prompt_ids), room)
        prompt_ids = prompt_ids[-room:]
    lanes = len(seeds)
    rngs = [np.random.default_rng(s) for s in seeds]
    cache, h = prefill(model, np.asarray(prompt_ids)[None, :], max_len=len(prompt_ids) + config.max_new_tokens)
    cache = cache.repeat(lanes)
    h = np.repeat(h, lanes, axis=0)
    head = model.head
    V = model.config.vocab_size
    seen = np.zeros((lanes, V), dtype=bool)
    seen[:, prompt_ids] = True
    eos = model.tokenizer.eos_id if config.stop_at_eos else None
    out = [[] for _ in range(lanes)]
    done = np.zeros(lanes, dtype=bool)
    penalty, top_p = float(config.repetition_penalty), float(config.top_p)
    for step in range(config.max_new_tokens):
        logits = transform(h) @ head
        if not np.all(np.isfinite(logits)):
            raise NumericError("non-finite logits", step=step)
        nxt = np.empty(lanes, dtype=np.int64)
        for lane in range(lanes):
            u = rngs[lane].random()
            if done[lane]:
                nxt[lane] = prompt_ids[-1]
                continue
            tok = sample(logits[lane], seen[lane], penalty, top_p, u)
            if tok < 0:
                raise NumericError("empty nucleus", step=step)
            nxt[lane] = tok
            if eos is not None and tok == eos:
                done[lane] = True
                continue
            out[lane].append(int(tok))
            seen[lane, tok] = True
        if done.all() or step == config.max_new_tokens - 1:
            break
        h = decode_step(model, cache, nxt)
    return out


def generate(base, taus, alphas, prompt, config=None, backend=None):
    """Sample ``config.num_return`` continuations of ``prompt``.

    Each step computes the base hidden state, maps it through the weighted
    transforms, applies the shared head, repetition penalty and nucleus
    filter, then samples. An empty ``taus`` list decodes the base model.
    Guider models are deliberately not part of this signature.
    """
    config = config or DecodeConfig()
    transform = CompiledCombination(list(taus), alphas, backend=backend)
    ids = _prompt_ids(base, prompt)
    seeds = [_lane_seed(config.seed, i) for i in range(config.num_return)]
    sample = kernels.BACKENDS[backend]["sample_token"] if backend else None
    lanes = _decode_lanes(base, transform, ids, seeds, config, sample)
    conts = [Continuation(t, base.tokenizer.decode(t), s) for t, s in zip(lanes, seeds)]
    alpha = tuple(transform.alphas) if transform else ()
    return GenerationBatch(prompt, conts, config, alpha)


def generate_unprompted(base, taus, alphas, config, n_sequences, backend=None):
    """``n_sequences`` BOS-conditioned samples, grouped into batches of ``num_return``.

    Lane seeds depend only on ``(config.seed, sequence index)``.
    """
    if base.bos_id is None:
        raise ConfigError("tokenizer has no BOS token")
    if n_sequences < 0:
        raise InputError("n_sequences must be >= 0")
    transform = CompiledCombination(list(taus), alphas, backend=backend)
    alpha = tuple(transform.alphas) if transform else ()
    sample = kernels.BACKENDS[backend]["sample_token"] if backend else None
    batches = []
    for start in range(0, n_sequences, config.num_return):
        seeds = [_lane_seed(config.seed, i) for i in range(start, min(start + config.num_return, n_sequences))]
        lanes = _decode_lanes(base, transform, [base.bos_id], seeds, config, sample)
        conts = [Continuation(t, base.tokenizer.decode(t), s) for t, s in zip(lanes, seeds)]
        batches.append(GenerationBatch("", conts, config, alpha))
    return batches


def write_generations(path, batches):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for batch in batches:
            for rec in batch.records():
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


def read_generations(path):
    """Load generation records as a list of per-prompt groups (file order preserved).

    A new group starts whenever ``continuation_index`` resets to 0.
    """
    groups = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            if rec["continuation_index"] == 0 or not groups:
                groups.append([])
            groups[-1].append(rec)
    return groups
