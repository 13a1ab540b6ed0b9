"""Residual transformation block applied to pre-head hidden states."""
from dataclasses import asdict, dataclass

import numpy as np

from .. import kernels
from ..errors import ConfigError
from .lm import gelu, gelu_grad

ACTIVATIONS = {
    "identity": (lambda z: z, lambda z: np.ones_like(z)),
    "tanh": (np.tanh, lambda z: 1.0 - np.tanh(z) ** 2),
    "gelu": (gelu, gelu_grad),
    "relu": (lambda z: np.maximum(z, 0.0), lambda z: (z > 0).astype(z.dtype)),
}
WEIGHT_SUM_TOL = 1e-9


@dataclass(frozen=True)
class TransformBlockConfig:
    hidden_dim: int
    kappa: float = 0.5
    num_blocks: int = 2
    activation: str = "gelu"
    seed: int = 0

    def __post_init__(self):
        if self.hidden_dim < 1:
            raise ConfigError("hidden_dim must be positive")
        if self.kappa <= 0 or self.kappa * self.hidden_dim < 1:
            raise ConfigError(f"kappa * hidden_dim = {self.kappa * self.hidden_dim} < 1")
        if self.num_blocks < 1:
            raise ConfigError("num_blocks must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}; choose from {sorted(ACTIVATIONS)}")

    @property
    def intermediate_dim(self):
        return max(1, int(np.floor(self.kappa * self.hidden_dim + 0.5)))

    def to_dict(self):
        return asdict(self)


@dataclass
class TransformBlock:
    config: TransformBlockConfig
    sub_blocks: list  # [{"W_in": [H,K], "b_in": [K], "W_out": [K,H], "b_out": [H]}, ...]

    def copy(self):
        return TransformBlock(self.config, [{k: v.copy() for k, v in sb.items()} for sb in self.sub_blocks])

    def flat_params(self):
        return {f"{i}.{k}": v for i, sb in enumerate(self.sub_blocks) for k, v in sb.items()}

    def stacked(self):
        """Parameters stacked along a leading block axis, as the kernels expect."""
        return tuple(np.ascontiguousarray(np.stack([sb[k] for sb in self.sub_blocks]))
                     for k in ("W_in", "b_in", "W_out", "b_out"))


def init_transform(config):
    """Fresh block: PyTorch-Linear-style uniform W_in/b_in, zero W_out/b_out (identity map)."""
    H, K = config.hidden_dim, config.intermediate_dim
    rng = np.random.default_rng(config.seed)
    bound = 1.0 / np.sqrt(H)
    subs = []
    for _ in range(config.num_blocks):
        subs.append({
            "W_in": rng.uniform(-bound, bound, (H, K)),
            "b_in": rng.uniform(-bound, bound, K),
            "W_out": np.zeros((K, H)),
            "b_out": np.zeros(H),
        })
    return TransformBlock(config, subs)


def _check_dim(tau, h):
    if h.shape[-1] != tau.config.hidden_dim:
        raise ConfigError(f"hidden dim {h.shape[-1]} does not match transform dim {tau.config.hidden_dim}")


def apply_transform(tau, h):
    h = np.asarray(h, dtype=np.float64)
    _check_dim(tau, h)
    act = ACTIVATIONS[tau.config.activation][0]
    out = h
    for sb in tau.sub_blocks:
        out = out + act(out @ sb["W_in"] + sb["b_in"]) @ sb["W_out"] + sb["b_out"]
    return out


def transform_forward(tau, h):
    """Forward pass keeping what ``transform_backward`` needs."""
    h = np.asarray(h, dtype=np.float64)
    _check_dim(tau, h)
    act = ACTIVATIONS[tau.config.activation][0]
    cache = []
    out = h
    for sb in tau.sub_blocks:
        z = out @ sb["W_in"] + sb["b_in"]
        a = act(z)
        cache.append((out, z, a))
        out = out + a @ sb["W_out"] + sb["b_out"]
    return out, cache


def transform_backward(tau, cache, dout):
    """Return ``(grads, dh)``; grads mirrors ``tau.sub_blocks``."""
    dact = ACTIVATIONS[tau.config.activation][1]
    H = tau.config.hidden_dim
    grads = [None] * len(tau.sub_blocks)
    for i in reversed(range(len(tau.sub_blocks))):
        sb = tau.sub_blocks[i]
        x, z, a = cache[i]
        K = z.shape[-1]
        d2 = dout.reshape(-1, H)
        g = {"W_out": a.reshape(-1, K).T @ d2, "b_out": d2.sum(0)}
        dz = (dout @ sb["W_out"].T) * dact(z)
        g["W_in"] = x.reshape(-1, H).T @ dz.reshape(-1, K)
        g["b_in"] = dz.reshape(-1, K).sum(0)
        grads[i] = g
        dout = dout + dz @ sb["W_in"].T
    return grads, dout


@dataclass(frozen=True)
class MultiAttributeWeights:
    alphas: tuple

    def __post_init__(self):
        a = tuple(float(x) for x in self.alphas)
        object.__setattr__(self, "alphas", a)
        if not a:
            raise ConfigError("at least one weight is required")
        if any(x < 0 or not np.isfinite(x) for x in a):
            raise ConfigError(f"weights must be finite and non-negative: {a}")
        if abs(sum(a) - 1.0) > WEIGHT_SUM_TOL:
            raise ConfigError(f"weights must sum to 1 (got {sum(a)!r})")

    def __len__(self):
        return len(self.alphas)

    def __iter__(self):
        return iter(self.alphas)


def as_weights(alphas, n):
    if alphas is None:
        if n != 1:
            raise ConfigError("weights are required when combining several transforms")
        alphas = (1.0,)
    if not isinstance(alphas, MultiAttributeWeights):
        alphas = MultiAttributeWeights(tuple(alphas))
    if len(alphas) != n:
        raise ConfigError(f"{n} transforms but {len(alphas)} weights")
    return alphas


def combine_transforms(taus, alphas, h):
    """Convex combination ``sum_i alpha_i * tau_i(h)``."""
    if not taus:
        raise ConfigError("need at least one transform")
    alphas = as_weights(alphas, len(taus))
    h = np.asarray(h, dtype=np.float64)
    out = np.zeros_like(h)
    for tau, a in zip(taus, alphas):
        out = out + a * apply_transform(tau, h)
    return out


class CompiledCombination:
    """Decode-time fast path for ``combine_transforms`` on ``[rows, H]`` states.

    Parameters are stacked once and each transform runs through the
    accelerated kernel, so per-token overhead stays at one call per transform.
    """

    def __init__(self, taus, alphas, backend=None):
        self.alphas = as_weights(alphas, len(taus)) if taus else None
        self.stacks = [tau.stacked() for tau in taus]
        self.acts = [kernels.ACT_CODES[tau.config.activation] for tau in taus]
        self.hidden_dim = taus[0].config.hidden_dim if taus else None
        self._rows = kernels.BACKENDS[backend]["transform_rows"] if backend else kernels.transform_rows

    def __bool__(self):
        return bool(self.stacks)

    def __call__(self, h):
        if not self.stacks:
            return h
        if h.shape[-1] != self.hidden_dim:
            raise ConfigError("hidden dim does not match transforms")
        out = np.zeros_like(h)
        for (w_in, b_in, w_out, b_out), act, a in zip(self.stacks, self.acts, self.alphas):
            out = out + a * self._rows(h, w_in, b_in, w_out, b_out, act)
        return out
