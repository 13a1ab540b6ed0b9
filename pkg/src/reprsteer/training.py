"""Guider fine-tuning with a locked LM head and transformation-block training."""
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .core.lm import causal_lm_loss, forward_hidden
from .core.transform import transform_backward, transform_forward
from .errors import ConfigError, ContractError, InputError, NumericError

log = logging.getLogger(__name__)


@dataclass
class FinetuneConfig:
    epochs: int = 3
    batch_size: int = 32
    learning_rate: float = 2e-5
    block_size: int = 128
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.block_size < 2 or self.learning_rate <= 0:
            raise ConfigError(f"invalid fine-tune config {self}")


@dataclass
class ChrtTrainConfig:
    loss_weight_a: int = 1
    loss_weight_b: int = 1
    margin_delta: float = 1.0
    distance_p: int = 2
    epochs: int = 3
    batch_size: int = 16
    learning_rate: float = 2e-5
    block_size: int = 128
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        a, b = self.loss_weight_a, self.loss_weight_b
        if a < 0 or b < 0 or a + b == 0:
            raise ConfigError(f"loss weights must be non-negative and not both zero, got a={a}, b={b}")
        if self.margin_delta <= 0:
            raise ConfigError("margin_delta must be positive")
        if self.distance_p != 2:
            raise ConfigError("only the L2 distance (p=2) is supported")
        if self.epochs < 0 or self.batch_size < 1 or self.block_size < 1 or self.learning_rate <= 0:
            raise ConfigError(f"invalid training config {self}")

    @property
    def lam(self):
        """Preservation weight: a / (a + b)."""
        return self.loss_weight_a / (self.loss_weight_a + self.loss_weight_b)

    @property
    def variant_name(self):
        return f"CHRT_{self.loss_weight_a}{self.loss_weight_b}"

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class LossBreakdown:
    contrastive: float
    preservation: float
    total: float


class AdamW:
    """Decoupled weight-decay Adam (torch.optim.AdamW semantics) over dicts of arrays."""

    def __init__(self, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.betas
        for name, g in grads.items():
            p = params[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            v = self.v[name]
            if self.weight_decay:
                p *= 1.0 - self.lr * self.weight_decay
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            p -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def make_blocks(sequences, block_size):
    """Concatenate token sequences and cut them into ``block_size`` rows.

    The trailing remainder is dropped, as in the usual causal-LM grouping;
    a corpus shorter than one block yields a single short row.
    """
    flat = [t for seq in sequences for t in seq]
    if not flat:
        raise InputError("empty corpus")
    n = len(flat) // block_size
    if n == 0:
        return np.asarray([flat], dtype=np.int64)
    return np.asarray(flat[:n * block_size], dtype=np.int64).reshape(n, block_size)


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def train_causal_lm(model, sequences, config, frozen=()):
    """Plain next-token fine-tuning; names in ``frozen`` never change.

    Returns ``(new_model, log)`` where log holds one ``{step, epoch, loss}``
    record per optimizer step.
    """
    blocks = make_blocks(sequences, min(config.block_size, model.config.max_positions))
    model = model.copy()
    rng = np.random.default_rng(config.seed)
    opt = AdamW(config.learning_rate, weight_decay=config.weight_decay)
    history, step = [], 0
    for epoch in range(config.epochs):
        for idx in _batches(len(blocks), config.batch_size, rng):
            loss, grads = causal_lm_loss(model, blocks[idx], with_grads=True)
            for name in frozen:
                grads.pop(name, None)
            opt.step(model.params, grads)
            history.append({"step": step, "epoch": epoch, "loss": loss})
            step += 1
    return model, history


def finetune_guider(base, corpus, config=None):
    """Fine-tune a copy of ``base`` on ``corpus`` with the LM head (and tied embedding) locked."""
    config = config or FinetuneConfig()
    corpus = [list(s) for s in corpus]
    if not any(corpus):
        raise InputError("empty corpus")
    if not base.head_locked:
        raise ContractError("base model head must be locked before guider fine-tuning")
    before = base.head_checksum()
    model, _ = train_causal_lm(base, corpus, config, frozen=base.head_param_names)
    model.head_locked = True
    if model.head_checksum() != before:
        raise ContractError("LM head drifted during guider fine-tuning")
    return model


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _valid(shape, mask):
    if mask is None:
        return np.ones(shape[:-1], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != shape[:-1]:
        raise InputError(f"mask shape {mask.shape} does not match states {shape[:-1]}")
    return mask


def _unit(diff, dist):
    safe = np.where(dist > 0, dist, 1.0)
    return np.where(dist[..., None] > 0, diff / safe[..., None], 0.0)


def triplet_loss_grad(h_prime, h_plus, h_minus, delta, mask=None):
    """Mean hinge ``max(d(h', h+) - d(h', h-) + delta, 0)`` and its gradient w.r.t. ``h'``."""
    h_prime, h_plus, h_minus = (np.asarray(x, dtype=np.float64) for x in (h_prime, h_plus, h_minus))
    if not (h_prime.shape == h_plus.shape == h_minus.shape):
        raise InputError(f"shape mismatch: {h_prime.shape}, {h_plus.shape}, {h_minus.shape}")
    valid = _valid(h_prime.shape, mask)
    count = max(int(valid.sum()), 1)
    dp, dm = h_prime - h_plus, h_prime - h_minus
    d_pos = np.sqrt((dp * dp).sum(-1))
    d_neg = np.sqrt((dm * dm).sum(-1))
    hinge = d_pos - d_neg + delta
    active = (hinge > 0) & valid
    loss = float(np.where(active, hinge, 0.0).sum() / count)
    grad = (_unit(dp, d_pos) - _unit(dm, d_neg)) * (active / count)[..., None]
    return loss, grad


def triplet_loss(h_prime, h_plus, h_minus, delta, mask=None):
    return triplet_loss_grad(h_prime, h_plus, h_minus, delta, mask)[0]


def preservation_loss_grad(h, h_prime, mask=None):
    """Mean per-position L2 distance ``||h - h'||`` and its gradient w.r.t. ``h'``."""
    h, h_prime = np.asarray(h, dtype=np.float64), np.asarray(h_prime, dtype=np.float64)
    if h.shape != h_prime.shape:
        raise InputError(f"shape mismatch: {h.shape} vs {h_prime.shape}")
    valid = _valid(h.shape, mask)
    count = max(int(valid.sum()), 1)
    diff = h_prime - h
    dist = np.sqrt((diff * diff).sum(-1))
    loss = float(np.where(valid, dist, 0.0).sum() / count)
    grad = _unit(diff, dist) * (valid / count)[..., None]
    return loss, grad


def preservation_loss(h, h_prime, mask=None):
    return preservation_loss_grad(h, h_prime, mask)[0]


def combined_loss(config, lc, lp):
    if lc < 0 or lp < 0:
        raise InputError("loss components must be non-negative")
    lam = config.lam
    return LossBreakdown(contrastive=float(lc), preservation=float(lp), total=lam * lp + (1 - lam) * lc)


def chrt_objective(tau, h, h_plus, h_minus, config, mask=None):
    """Joint loss for one batch and its gradient w.r.t. every parameter of ``tau``."""
    h_prime, cache = transform_forward(tau, h)
    lc, g_c = triplet_loss_grad(h_prime, h_plus, h_minus, config.margin_delta, mask)
    lp, g_p = preservation_loss_grad(h, h_prime, mask)
    breakdown = combined_loss(config, lc, lp)
    dh_prime = config.lam * g_p + (1 - config.lam) * g_c
    grads, _ = transform_backward(tau, cache, dh_prime)
    return breakdown, grads


def _hidden_states(model, blocks, chunk=64):
    return np.concatenate([forward_hidden(model, blocks[i:i + chunk]) for i in range(0, len(blocks), chunk)])


def train_chrt(base, guiders, tau, corpus, config=None, log_path=None):
    """Learn ``tau`` so that ``tau(h)`` moves toward LM+ states and away from LM- states.

    Only ``tau`` is updated; base and guider weights are hashed before and
    after and must match. Returns ``(trained_tau, log)``.
    """
    config = config or ChrtTrainConfig()
    lm_plus, lm_minus = guiders
    models = {"base": base, "lm_plus": lm_plus, "lm_minus": lm_minus}
    for name, m in models.items():
        if (m.config.hidden_dim, m.config.vocab_size) != (base.config.hidden_dim, base.config.vocab_size):
            raise ConfigError(f"{name} dimensions differ from the base model")
        if m.head_checksum() != base.head_checksum():
            raise ContractError(f"{name} does not share the base model's LM head")
        if m.tokenizer.vocab != base.tokenizer.vocab:
            raise ConfigError(f"{name} tokenizer differs from the base model")
    if tau.config.hidden_dim != base.config.hidden_dim:
        raise ConfigError("transform hidden dim does not match the base model")
    before = {name: m.checksum() for name, m in models.items()}

    blocks = make_blocks([list(s) for s in corpus], min(config.block_size, base.config.max_positions))
    h_all = _hidden_states(base, blocks)
    hp_all = _hidden_states(lm_plus, blocks)
    hm_all = _hidden_states(lm_minus, blocks)

    tau = tau.copy()
    params = tau.flat_params()
    opt = AdamW(config.learning_rate, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    history, step = [], 0
    if log_path:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
    sink = open(log_path, "w") if log_path else None
    try:
        for epoch in range(config.epochs):
            for idx in _batches(len(blocks), config.batch_size, rng):
                breakdown, grads = chrt_objective(tau, h_all[idx], hp_all[idx], hm_all[idx], config)
                if not np.isfinite(breakdown.total):
                    raise NumericError("non-finite training loss", step=step)
                flat = {f"{i}.{k}": v for i, g in enumerate(grads) for k, v in g.items()}
                opt.step(params, flat)
                rec = {"step": step, "epoch": epoch, "contrastive": breakdown.contrastive,
                       "preservation": breakdown.preservation, "total": breakdown.total,
                       "lambda": config.lam}
                history.append(rec)
                if sink:
                    sink.write(json.dumps(rec) + "\n")
                step += 1
    finally:
        if sink:
            sink.close()

    after = {name: m.checksum() for name, m in models.items()}
    if after != before:
        raise ContractError("frozen model weights changed during transform training")
    return tau, history


def epoch_means(history, key):
    epochs = sorted({r["epoch"] for r in history})
    return [float(np.mean([r[key] for r in history if r["epoch"] == e])) for e in epochs]


def read_training_log(path, tol=1e-9):
    """Load a JSONL training log and check every record's lambda decomposition."""
    records = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    for r in records:
        lam = r["lambda"]
        expect = lam * r["preservation"] + (1 - lam) * r["contrastive"]
        if abs(expect - r["total"]) > tol:
            raise ContractError(f"log step {r['step']}: total {r['total']} != {expect}")
    return records
