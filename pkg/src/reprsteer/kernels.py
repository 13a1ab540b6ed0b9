"""Hot inner loops of decoding and evaluation.

Every kernel exists twice: a numba ``@njit`` version and a pure-numpy
version. The numba path is used by default; set ``REPRSTEER_DISABLE_NUMBA=1``
before import to force the numpy path (or if numba is not importable).
Both variants are always importable under explicit names so they can be
tested against each other and benchmarked.
"""
import os

import numpy as np

try:
    import numba
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

DISABLED = os.environ.get("REPRSTEER_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}
USE_NUMBA = HAVE_NUMBA and not DISABLED
BACKEND = "numba" if USE_NUMBA else "numpy"

# activation codes shared with reprsteer.core.transform
ACT_CODES = {"identity": 0, "tanh": 1, "gelu": 2, "relu": 3}
_GELU_C = 0.7978845608028654  # sqrt(2/pi)


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------

def nucleus_filter_numpy(probs, top_p):
    if top_p >= 1.0:
        return probs.copy()
    order = np.argsort(-probs, kind="stable")
    cum = np.cumsum(probs[order])
    k = min(int(np.searchsorted(cum, top_p, side="left")) + 1, probs.shape[0])
    keep = order[:k]
    out = np.zeros_like(probs)
    out[keep] = probs[keep] / probs[keep].sum()
    return out


def repetition_penalty_numpy(logits, seen, penalty):
    out = logits.copy()
    if penalty == 1.0:
        return out
    vals = out[seen]
    out[seen] = np.where(vals > 0, vals / penalty, vals * penalty)
    return out


def sample_token_numpy(logits, seen, penalty, top_p, u):
    """Penalty -> softmax -> nucleus filter -> inverse-CDF draw with uniform ``u``."""
    x = repetition_penalty_numpy(logits, seen, penalty)
    x = np.exp(x - x.max())
    probs = x / x.sum()
    probs = nucleus_filter_numpy(probs, top_p)
    cum = np.cumsum(probs)
    tok = int(np.searchsorted(cum, u * cum[-1], side="right"))
    if tok >= probs.shape[0]:
        tok = int(np.flatnonzero(probs > 0)[-1])
    return tok


def _act_numpy(z, act):
    if act == 0:
        return z
    if act == 1:
        return np.tanh(z)
    if act == 2:
        return 0.5 * z * (1.0 + np.tanh(_GELU_C * (z + 0.044715 * z ** 3)))
    return np.maximum(z, 0.0)


def transform_rows_numpy(x, w_in, b_in, w_out, b_out, act):
    """Residual sub-block stack on a 2-D ``[rows, H]`` array.

    ``w_in`` is ``[num_blocks, H, K]``, ``w_out`` is ``[num_blocks, K, H]``.
    """
    out = x
    for blk in range(w_in.shape[0]):
        z = out @ w_in[blk] + b_in[blk]
        out = out + _act_numpy(z, act) @ w_out[blk] + b_out[blk]
    return out


def count_ngrams_numpy(flat, offsets, n):
    """Return ``(distinct, total)`` n-gram counts pooled over sequences.

    ``flat`` concatenates all sequences, ``offsets`` has ``len(seqs) + 1``
    boundaries. n-grams never cross a sequence boundary.
    """
    rows = []
    for i in range(offsets.shape[0] - 1):
        seq = flat[offsets[i]:offsets[i + 1]]
        if seq.shape[0] >= n:
            rows.append(np.lib.stride_tricks.sliding_window_view(seq, n))
    if not rows:
        return 0, 0
    grams = np.concatenate(rows, axis=0)
    return int(np.unique(grams, axis=0).shape[0]), int(grams.shape[0])


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def nucleus_filter_numba(probs, top_p):
        v = probs.shape[0]
        out = np.zeros_like(probs)
        if top_p >= 1.0:
            for i in range(v):
                out[i] = probs[i]
            return out
        order = np.argsort(-probs, kind="mergesort")
        cum = 0.0
        k = v
        for j in range(v):
            cum += probs[order[j]]
            if cum >= top_p:
                k = j + 1
                break
        total = 0.0
        for j in range(k):
            total += probs[order[j]]
        for j in range(k):
            out[order[j]] = probs[order[j]] / total
        return out

    @njit(cache=True)
    def repetition_penalty_numba(logits, seen, penalty):
        out = logits.copy()
        if penalty == 1.0:
            return out
        for i in range(out.shape[0]):
            if seen[i]:
                if out[i] > 0:
                    out[i] = out[i] / penalty
                else:
                    out[i] = out[i] * penalty
        return out

    @njit(cache=True)
    def sample_token_numba(logits, seen, penalty, top_p, u):
        x = repetition_penalty_numba(logits, seen, penalty)
        m = x.max()
        total = 0.0
        for i in range(x.shape[0]):
            x[i] = np.exp(x[i] - m)
            total += x[i]
        for i in range(x.shape[0]):
            x[i] /= total
        probs = nucleus_filter_numba(x, top_p)
        mass = 0.0
        for i in range(probs.shape[0]):
            mass += probs[i]
        target = u * mass
        cum = 0.0
        last = -1
        for i in range(probs.shape[0]):
            if probs[i] > 0:
                last = i
            cum += probs[i]
            if cum > target and probs[i] > 0:
                return i
        return last

    @njit(cache=True)
    def _act_numba(z, act):
        if act == 0:
            return z
        out = np.empty_like(z)
        for i in range(z.shape[0]):
            for j in range(z.shape[1]):
                t = z[i, j]
                if act == 1:
                    out[i, j] = np.tanh(t)
                elif act == 2:
                    out[i, j] = 0.5 * t * (1.0 + np.tanh(_GELU_C * (t + 0.044715 * t * t * t)))
                else:
                    out[i, j] = t if t > 0.0 else 0.0
        return out

    @njit(cache=True)
    def _affine(x, w, b):
        # plain loops: numba's matmul needs scipy's BLAS bindings
        out = np.empty((x.shape[0], w.shape[1]))
        for i in range(x.shape[0]):
            for j in range(w.shape[1]):
                acc = b[j]
                for k in range(x.shape[1]):
                    acc += x[i, k] * w[k, j]
                out[i, j] = acc
        return out

    @njit(cache=True)
    def transform_rows_numba(x, w_in, b_in, w_out, b_out, act):
        out = x.copy()
        for blk in range(w_in.shape[0]):
            z = _act_numba(_affine(out, w_in[blk], b_in[blk]), act)
            out = out + _affine(z, w_out[blk], b_out[blk])
        return out

    @njit(cache=True)
    def _ngram_keys(flat, offsets, n, base):
        total = 0
        for i in range(offsets.shape[0] - 1):
            length = offsets[i + 1] - offsets[i]
            if length >= n:
                total += length - n + 1
        keys = np.empty(total, dtype=np.int64)
        pos = 0
        for i in range(offsets.shape[0] - 1):
            start = offsets[i]
            stop = offsets[i + 1]
            for j in range(start, stop - n + 1):
                key = 0
                for t in range(n):
                    key = key * base + flat[j + t]
                keys[pos] = key
                pos += 1
        return keys

    def count_ngrams_numba(flat, offsets, n):
        base = int(flat.max()) + 1 if flat.shape[0] else 1
        # keys must fit in int64; fall back for huge vocab / long n-grams
        if base ** n >= 2 ** 62:
            return count_ngrams_numpy(flat, offsets, n)
        keys = _ngram_keys(flat.astype(np.int64), offsets.astype(np.int64), n, base)
        if keys.shape[0] == 0:
            return 0, 0
        return int(np.unique(keys).shape[0]), int(keys.shape[0])

else:  # pragma: no cover
    nucleus_filter_numba = nucleus_filter_numpy
    repetition_penalty_numba = repetition_penalty_numpy
    sample_token_numba = sample_token_numpy
    transform_rows_numba = transform_rows_numpy
    count_ngrams_numba = count_ngrams_numpy


if USE_NUMBA:
    nucleus_filter = nucleus_filter_numba
    repetition_penalty = repetition_penalty_numba
    sample_token = sample_token_numba
    transform_rows = transform_rows_numba
    count_ngrams = count_ngrams_numba
else:
    nucleus_filter = nucleus_filter_numpy
    repetition_penalty = repetition_penalty_numpy
    sample_token = sample_token_numpy
    transform_rows = transform_rows_numpy
    count_ngrams = count_ngrams_numpy

BACKENDS = {
    "numpy": {
        "nucleus_filter": nucleus_filter_numpy,
        "repetition_penalty": repetition_penalty_numpy,
        "sample_token": sample_token_numpy,
        "transform_rows": transform_rows_numpy,
        "count_ngrams": count_ngrams_numpy,
    },
    "numba": {
        "nucleus_filter": nucleus_filter_numba,
        "repetition_penalty": repetition_penalty_numba,
        "sample_token": sample_token_numba,
        "transform_rows": transform_rows_numba,
        "count_ngrams": count_ngrams_numba,
    },
}
