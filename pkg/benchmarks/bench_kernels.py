"""Compare the numba and pure-numpy kernel backends.

Usage: python3 benchmarks/bench_kernels.py [--repeat 200] [--vocab 50257] [--json out.json]

Times each hot kernel in isolation on both backends (after a warm-up call
so numba compilation is excluded), then a full 25-token decode on a small
random model with and without a transform.
"""
import argparse
import json
import platform
import timeit

import numpy as np

from reprsteer import kernels
from reprsteer.core import LMConfig, TransformBlockConfig, init_model, init_transform
from reprsteer.generation import DecodeConfig, generate
from reprsteer.tokenizer import WordTokenizer


def kernel_cases(vocab, hidden, rows, rng):
    logits = rng.normal(size=vocab)
    probs = np.exp(logits - logits.max())
    probs /= probs.sum()
    seen = rng.integers(0, vocab, size=64).astype(np.int64)
    k = hidden // 2
    x = rng.normal(size=(rows, hidden))
    w_in, b_in = rng.normal(size=(2, hidden, k)) * 0.1, rng.normal(size=(2, k)) * 0.1
    w_out, b_out = rng.normal(size=(2, k, hidden)) * 0.1, rng.normal(size=(2, hidden)) * 0.1
    seqs = [rng.integers(0, 500, size=25) for _ in range(25)]
    flat = np.concatenate(seqs).astype(np.int64)
    offsets = np.arange(0, 26 * 25, 25, dtype=np.int64)
    return {
        "nucleus_filter": lambda f: f(probs, 0.8),
        "repetition_penalty": lambda f: f(logits, seen, 1.2),
        "sample_token": lambda f: f(logits, seen, 1.2, 0.8, 0.37),
        "transform_rows": lambda f: f(x, w_in, b_in, w_out, b_out, 2),
        "count_ngrams": lambda f: f(flat, offsets, 3),
    }


def time_call(fn, repeat):
    fn()  # warm-up / JIT
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def bench_kernels(args, backends):
    rng = np.random.default_rng(0)
    cases = kernel_cases(args.vocab, args.hidden, args.rows, rng)
    results = {}
    for name, call in cases.items():
        results[name] = {b: time_call(lambda b=b: call(kernels.BACKENDS[b][name]), args.repeat) for b in backends}
    return results


def bench_decode(args, backends):
    words = [f"w{i}" for i in range(args.decode_vocab)]
    tok = WordTokenizer(words)
    cfg = LMConfig(vocab_size=len(tok), hidden_dim=args.hidden, n_layers=2, n_heads=4, max_positions=64)
    model = init_model(cfg, tok, seed=0, head_locked=True)
    tau = init_transform(TransformBlockConfig(args.hidden, seed=0))
    tau.sub_blocks[0]["W_out"][...] = 0.01
    dc = DecodeConfig(max_new_tokens=25, num_return=1, seed=0, stop_at_eos=False)
    out = {}
    for label, taus in (("decode_base", []), ("decode_chrt", [tau])):
        out[label] = {b: time_call(lambda b=b, t=taus: generate(model, t, None, "", dc, backend=b),
                                   max(5, args.repeat // 20)) for b in backends}
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--vocab", type=int, default=50257, help="Vocabulary size for the sampling kernels.")
    ap.add_argument("--hidden", type=int, default=64)
    ap.add_argument("--rows", type=int, default=25, help="Rows per transform call (decode lanes).")
    ap.add_argument("--decode-vocab", type=int, default=2000)
    ap.add_argument("--json", default=None, help="Also write results here.")
    args = ap.parse_args()

    backends = ["numpy", "numba"] if kernels.HAVE_NUMBA else ["numpy"]
    results = bench_kernels(args, backends)
    results.update(bench_decode(args, backends))

    print(f"python {platform.python_version()}, numpy {np.__version__}, default backend {kernels.BACKEND}")
    header = f"{'kernel':<20}" + "".join(f"{b + ' (us)':>14}" for b in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10}"
    print(header)
    for name, row in results.items():
        line = f"{name:<20}" + "".join(f"{row[b] * 1e6:>14.1f}" for b in backends)
        if len(backends) == 2:
            line += f"{row['numpy'] / row['numba']:>9.2f}x"
        print(line)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"args": vars(args), "seconds": results}, fh, indent=2)


if __name__ == "__main__":
    main()
