"""A small pre-LayerNorm decoder-only transformer in numpy.

The model exposes its final hidden state (the LayerNorm output that feeds
the LM head) and carries a hand-written backward pass so guider models can
be fine-tuned without an autodiff framework.
"""
import copy
import hashlib
from dataclasses import asdict, dataclass

import numpy as np

from ..errors import ConfigError, ContractError, InputError, NumericError

LN_EPS = 1e-5
_GELU_C = 0.7978845608028654


@dataclass(frozen=True)
class LMConfig:
    vocab_size: int
    hidden_dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_positions: int = 64
    tie_embeddings: bool = False

    def __post_init__(self):
        if self.vocab_size < 2 or self.hidden_dim < 1 or self.n_layers < 1 or self.max_positions < 1:
            raise ConfigError(f"invalid LM config {self}")
        if self.hidden_dim % self.n_heads:
            raise ConfigError("hidden_dim must be divisible by n_heads")

    @property
    def head_dim(self):
        return self.hidden_dim // self.n_heads

    def to_dict(self):
        return asdict(self)


@dataclass
class ModelBundle:
    """Parameters of a causal LM plus its tokenizer and head-lock flag.

    With ``tie_embeddings`` the head is ``wte.T`` and locking the head locks
    the input embedding with it.
    """

    config: LMConfig
    params: dict
    tokenizer: object
    head_locked: bool = True

    @property
    def head(self):
        if self.config.tie_embeddings:
            return self.params["wte"].T
        return self.params["head"]

    @property
    def head_param_names(self):
        return ("wte",) if self.config.tie_embeddings else ("head",)

    @property
    def base_weights(self):
        return {k: v for k, v in self.params.items() if k not in self.head_param_names}

    @property
    def bos_id(self):
        return getattr(self.tokenizer, "bos_id", None)

    def copy(self):
        return ModelBundle(self.config, {k: v.copy() for k, v in self.params.items()},
                           copy.deepcopy(self.tokenizer), self.head_locked)

    def checksum(self, names=None):
        return params_checksum(self.params, names)

    def head_checksum(self):
        return self.checksum(self.head_param_names)


def params_checksum(params, names=None):
    h = hashlib.sha256()
    for name in sorted(params if names is None else names):
        arr = np.ascontiguousarray(params[name])
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def init_model(config, tokenizer, seed=0, head_locked=False):
    """GPT-2 style init: N(0, 0.02) weights, residual projections scaled by depth."""
    if len(tokenizer) != config.vocab_size:
        raise ConfigError(f"tokenizer has {len(tokenizer)} entries, config says {config.vocab_size}")
    rng = np.random.default_rng(seed)
    H, V = config.hidden_dim, config.vocab_size
    std, res_std = 0.02, 0.02 / np.sqrt(2 * config.n_layers)
    p = {
        "wte": rng.normal(0, std, (V, H)),
        "wpe": rng.normal(0, 0.01, (config.max_positions, H)),
    }
    for layer in range(config.n_layers):
        pre = f"h{layer}."
        p[pre + "ln1_g"] = np.ones(H)
        p[pre + "ln1_b"] = np.zeros(H)
        p[pre + "attn_w"] = rng.normal(0, std, (H, 3 * H))
        p[pre + "attn_b"] = np.zeros(3 * H)
        p[pre + "proj_w"] = rng.normal(0, res_std, (H, H))
        p[pre + "proj_b"] = np.zeros(H)
        p[pre + "ln2_g"] = np.ones(H)
        p[pre + "ln2_b"] = np.zeros(H)
        p[pre + "fc_w"] = rng.normal(0, std, (H, 4 * H))
        p[pre + "fc_b"] = np.zeros(4 * H)
        p[pre + "mlp_w"] = rng.normal(0, res_std, (4 * H, H))
        p[pre + "mlp_b"] = np.zeros(H)
    p["lnf_g"] = np.ones(H)
    p["lnf_b"] = np.zeros(H)
    if not config.tie_embeddings:
        p["head"] = rng.normal(0, std, (H, V))
    return ModelBundle(config, p, tokenizer, head_locked)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def _layer_norm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _layer_norm_backward(dy, g, cache):
    xhat, rstd = cache
    dg = (dy * xhat).reshape(-1, dy.shape[-1]).sum(0)
    db = dy.reshape(-1, dy.shape[-1]).sum(0)
    dxhat = dy * g
    n = dy.shape[-1]
    dx = rstd / n * (n * dxhat - dxhat.sum(-1, keepdims=True)
                     - xhat * (dxhat * xhat).sum(-1, keepdims=True))
    return dx, dg, db


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x ** 3)))


def gelu_grad(x):
    t = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


def _split_heads(x, n_heads):
    B, T, H = x.shape
    return x.reshape(B, T, n_heads, H // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, nh, T, hd = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, nh * hd)


def _check_ids(model, token_ids):
    ids = np.asarray(token_ids)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.ndim != 2:
        raise InputError(f"token ids must be [B, T], got shape {ids.shape}")
    if ids.shape[1] == 0:
        raise InputError("empty token sequence")
    if ids.shape[1] > model.config.max_positions:
        raise InputError(f"sequence length {ids.shape[1]} exceeds max_positions {model.config.max_positions}")
    if not np.issubdtype(ids.dtype, np.integer):
        raise InputError("token ids must be integers")
    if ids.min() < 0 or ids.max() >= model.config.vocab_size:
        raise InputError("token id out of vocabulary range")
    return ids


def _forward(params, cfg, ids, keep_cache=False):
    B, T = ids.shape
    x = params["wte"][ids] + params["wpe"][:T]
    future = np.triu(np.ones((T, T), dtype=bool), 1)
    scale = 1.0 / np.sqrt(cfg.head_dim)
    caches = []
    for layer in range(cfg.n_layers):
        pre = f"h{layer}."
        a, ln1 = _layer_norm(x, params[pre + "ln1_g"], params[pre + "ln1_b"])
        qkv = a @ params[pre + "attn_w"] + params[pre + "attn_b"]
        q, k, v = (_split_heads(t, cfg.n_heads) for t in np.split(qkv, 3, axis=-1))
        s = (q @ k.transpose(0, 1, 3, 2)) * scale
        s = np.where(future, -np.inf, s)
        s = np.exp(s - s.max(-1, keepdims=True))
        att = s / s.sum(-1, keepdims=True)
        y = _merge_heads(att @ v)
        x2 = x + y @ params[pre + "proj_w"] + params[pre + "proj_b"]
        m, ln2 = _layer_norm(x2, params[pre + "ln2_g"], params[pre + "ln2_b"])
        f = m @ params[pre + "fc_w"] + params[pre + "fc_b"]
        g = gelu(f)
        x3 = x2 + g @ params[pre + "mlp_w"] + params[pre + "mlp_b"]
        if keep_cache:
            caches.append((a, ln1, q, k, v, att, y, m, ln2, f, g))
        x = x3
    h, lnf = _layer_norm(x, params["lnf_g"], params["lnf_b"])
    return h, (ids, caches, lnf)


def _backward(params, cfg, cache, dh):
    """Gradients of all non-head parameters given dL/dh."""
    ids, caches, lnf = cache
    B, T = ids.shape
    H = cfg.hidden_dim
    scale = 1.0 / np.sqrt(cfg.head_dim)
    grads = {}
    dx, grads["lnf_g"], grads["lnf_b"] = _layer_norm_backward(dh, params["lnf_g"], lnf)
    for layer in reversed(range(cfg.n_layers)):
        pre = f"h{layer}."
        a, ln1, q, k, v, att, y, m, ln2, f, g = caches[layer]
        grads[pre + "mlp_w"] = g.reshape(-1, 4 * H).T @ dx.reshape(-1, H)
        grads[pre + "mlp_b"] = dx.reshape(-1, H).sum(0)
        df = (dx @ params[pre + "mlp_w"].T) * gelu_grad(f)
        grads[pre + "fc_w"] = m.reshape(-1, H).T @ df.reshape(-1, 4 * H)
        grads[pre + "fc_b"] = df.reshape(-1, 4 * H).sum(0)
        dm = df @ params[pre + "fc_w"].T
        dx2, grads[pre + "ln2_g"], grads[pre + "ln2_b"] = _layer_norm_backward(dm, params[pre + "ln2_g"], ln2)
        dx2 = dx2 + dx
        grads[pre + "proj_w"] = y.reshape(-1, H).T @ dx2.reshape(-1, H)
        grads[pre + "proj_b"] = dx2.reshape(-1, H).sum(0)
        dy = _split_heads(dx2 @ params[pre + "proj_w"].T, cfg.n_heads)
        datt = dy @ v.transpose(0, 1, 3, 2)
        dv = att.transpose(0, 1, 3, 2) @ dy
        ds = att * (datt - (datt * att).sum(-1, keepdims=True)) * scale
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        dqkv = np.concatenate([_merge_heads(dq), _merge_heads(dk), _merge_heads(dv)], axis=-1)
        grads[pre + "attn_w"] = a.reshape(-1, H).T @ dqkv.reshape(-1, 3 * H)
        grads[pre + "attn_b"] = dqkv.reshape(-1, 3 * H).sum(0)
        da = dqkv @ params[pre + "attn_w"].T
        dx1, grads[pre + "ln1_g"], grads[pre + "ln1_b"] = _layer_norm_backward(da, params[pre + "ln1_g"], ln1)
        dx = dx2 + dx1
    dwte = np.zeros_like(params["wte"])
    np.add.at(dwte, ids, dx)
    dwpe = np.zeros_like(params["wpe"])
    dwpe[:T] = dx.sum(0)
    grads["wte"] = dwte
    grads["wpe"] = dwpe
    return grads


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def forward_hidden(model, token_ids):
    """Final pre-head hidden states ``[B, T, H]`` for ``token_ids`` ``[B, T]``."""
    ids = _check_ids(model, token_ids)
    h, _ = _forward(model.params, model.config, ids)
    if not np.all(np.isfinite(h)):
        raise NumericError("non-finite hidden state")
    return h


def lm_head_logits(model, h, require_locked=True):
    if require_locked and not model.head_locked:
        raise ContractError("LM head must be locked for shared-head inference")
    h = np.asarray(h)
    if h.shape[-1] != model.config.hidden_dim:
        raise ConfigError(f"hidden dim {h.shape[-1]} != model hidden dim {model.config.hidden_dim}")
    return h @ model.head


def log_softmax(logits):
    z = logits - logits.max(-1, keepdims=True)
    return z - np.log(np.exp(z).sum(-1, keepdims=True))


def causal_lm_loss(model, token_ids, mask=None, with_grads=False):
    """Mean next-token cross-entropy over positions ``1..T-1``.

    ``mask`` (``[B, T]`` booleans) marks real tokens; targets on masked
    positions are ignored. Returns ``loss`` or ``(loss, grads)`` where grads
    cover every parameter including the head (callers drop locked names).
    """
    ids = _check_ids(model, token_ids)
    if ids.shape[1] < 2:
        raise InputError("need at least two tokens for a next-token loss")
    h, cache = _forward(model.params, model.config, ids, keep_cache=with_grads)
    logits = h @ model.head
    logp = log_softmax(logits[:, :-1])
    targets = ids[:, 1:]
    valid = np.ones(targets.shape, bool) if mask is None else np.asarray(mask, bool)[:, 1:]
    count = valid.sum()
    if count == 0:
        raise InputError("no valid target positions")
    nll = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = float((nll * valid).sum() / count)
    if not np.isfinite(loss):
        raise NumericError("non-finite LM loss")
    if not with_grads:
        return loss
    dlogits = np.zeros_like(logits)
    probs = np.exp(logp)
    rows = np.arange(ids.shape[0])[:, None]
    cols = np.arange(ids.shape[1] - 1)[None, :]
    probs[rows, cols, targets] -= 1.0
    dlogits[:, :-1] = probs * (valid / count)[..., None]
    H, V = model.config.hidden_dim, model.config.vocab_size
    dhead = h.reshape(-1, H).T @ dlogits.reshape(-1, V)
    dh = dlogits @ model.head.T
    grads = _backward(model.params, model.config, cache, dh)
    if model.config.tie_embeddings:
        grads["wte"] = grads["wte"] + dhead.T
    else:
        grads["head"] = dhead
    return loss, grads


def next_token_logprobs(model, token_ids):
    """``[T, V]`` log-probabilities for a single 1-D sequence (row t predicts t+1)."""
    h = forward_hidden(model, np.asarray(token_ids)[None, :])[0]
    return log_softmax(h @ model.head)


# ---------------------------------------------------------------------------
# incremental decoding
# ---------------------------------------------------------------------------

class KVCache:
    """Per-layer key/value buffers ``[B, heads, max_len, head_dim]``."""

    def __init__(self, cfg, batch, max_len):
        shape = (batch, cfg.n_heads, max_len, cfg.head_dim)
        self.k = [np.zeros(shape) for _ in range(cfg.n_layers)]
        self.v = [np.zeros(shape) for _ in range(cfg.n_layers)]
        self.length = 0
        self.max_len = max_len

    def repeat(self, lanes):
        out = KVCache.__new__(KVCache)
        out.k = [np.repeat(k, lanes, axis=0) for k in self.k]
        out.v = [np.repeat(v, lanes, axis=0) for v in self.v]
        out.length = self.length
        out.max_len = self.max_len
        return out


def prefill(model, token_ids, max_len=None):
    """Run the prompt once; returns ``(cache, last hidden state [B, H])``."""
    ids = _check_ids(model, token_ids)
    cfg = model.config
    max_len = cfg.max_positions if max_len is None else max_len
    if max_len > cfg.max_positions:
        raise InputError("decode length exceeds max_positions")
    cache = KVCache(cfg, ids.shape[0], max_len)
    h = _decode(model, cache, ids)
    return cache, h[:, -1]


def decode_step(model, cache, tokens):
    """Append one token per lane and return the new hidden states ``[B, H]``."""
    tokens = np.asarray(tokens).reshape(-1, 1)
    if cache.length + 1 > cache.max_len:
        raise InputError("KV cache is full")
    return _decode(model, cache, tokens)[:, -1]


def _decode(model, cache, ids):
    p, cfg = model.params, model.config
    B, T = ids.shape
    start = cache.length
    stop = start + T
    x = p["wte"][ids] + p["wpe"][start:stop]
    scale = 1.0 / np.sqrt(cfg.head_dim)
    # query i (absolute start+i) sees keys 0..start+i
    future = np.arange(stop)[None, :] > (start + np.arange(T))[:, None]
    for layer in range(cfg.n_layers):
        pre = f"h{layer}."
        a, _ = _layer_norm(x, p[pre + "ln1_g"], p[pre + "ln1_b"])
        qkv = a @ p[pre + "attn_w"] + p[pre + "attn_b"]
        q, k, v = (_split_heads(t, cfg.n_heads) for t in np.split(qkv, 3, axis=-1))
        cache.k[layer][:, :, start:stop] = k
        cache.v[layer][:, :, start:stop] = v
        keys = cache.k[layer][:, :, :stop]
        s = (q @ keys.transpose(0, 1, 3, 2)) * scale
        if T > 1:
            s = np.where(future, -np.inf, s)
        s = np.exp(s - s.max(-1, keepdims=True))
        att = s / s.sum(-1, keepdims=True)
        y = _merge_heads(att @ cache.v[layer][:, :, :stop])
        x = x + y @ p[pre + "proj_w"] + p[pre + "proj_b"]
        m, _ = _layer_norm(x, p[pre + "ln2_g"], p[pre + "ln2_b"])
        x = x + gelu(m @ p[pre + "fc_w"] + p[pre + "fc_b"]) @ p[pre + "mlp_w"] + p[pre + "mlp_b"]
    cache.length = stop
    h, _ = _layer_norm(x, p["lnf_g"], p["lnf_b"])
    if not np.all(np.isfinite(h)):
        raise NumericError("non-finite hidden state during decoding")
    return h
