"""Benchmark the fused numba kernels against their pure-numpy twins.

Times the three hot paths (LSTM gate forward/backward, softmax
cross-entropy forward/backward, embedding scatter-add) at shapes matching
the published recipe (batch 20, unroll 35, hidden 200) and prints a
side-by-side table. Run with defaults or override shapes from the command
line:

    python3 benchmarks/bench_kernels.py --batch 20 --hidden 200 --vocab 10000
"""

import argparse
import time

import numpy as np

from cslm import kernels as K


def timeit(fn, repeat, warmup=3):
    for _ in range(warmup):
        fn()
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_pair(name, fn_nb, fn_np, repeat):
    t_np = timeit(fn_np, repeat)
    if fn_nb is None:
        print(f"{name:28s} numpy {t_np * 1e6:9.1f} us   (numba unavailable)")
        return
    t_nb = timeit(fn_nb, repeat)
    print(f"{name:28s} numpy {t_np * 1e6:9.1f} us   numba {t_nb * 1e6:9.1f} us"
          f"   speedup {t_np / t_nb:5.2f}x")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=20)
    ap.add_argument("--hidden", type=int, default=200)
    ap.add_argument("--vocab", type=int, default=10000)
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    B, H, V = args.batch, args.hidden, args.vocab
    print(f"backend = {K.backend()}   B={B} H={H} V={V} (float64)")

    pre = rng.standard_normal((B, 4 * H))
    c_prev = rng.standard_normal((B, H))
    gi, gf, gc, go, c, tc, h = K.lstm_gates_forward_np(pre, c_prev)
    dh = rng.standard_normal((B, H))
    dc = rng.standard_normal((B, H))

    logits = rng.standard_normal((B, V))
    targets = rng.integers(0, V, B)
    _, probs = K.softmax_xent_forward_np(logits, targets)
    gout = rng.standard_normal(B)

    table = np.zeros((V, H))
    ids = rng.integers(0, V, 32 * B)
    rows = rng.standard_normal((32 * B, H))

    have_nb = K.HAS_NUMBA
    pairs = [
        ("lstm_gates_forward",
         (lambda: K.lstm_gates_forward_nb(pre, c_prev)) if have_nb else None,
         lambda: K.lstm_gates_forward_np(pre, c_prev)),
        ("lstm_gates_backward",
         (lambda: K.lstm_gates_backward_nb(dh, dc, gi, gf, gc, go, c_prev, tc))
         if have_nb else None,
         lambda: K.lstm_gates_backward_np(dh, dc, gi, gf, gc, go, c_prev, tc)),
        ("softmax_xent_forward",
         (lambda: K.softmax_xent_forward_nb(logits, targets)) if have_nb else None,
         lambda: K.softmax_xent_forward_np(logits, targets)),
        ("softmax_xent_backward",
         (lambda: K.softmax_xent_backward_nb(probs, targets, gout))
         if have_nb else None,
         lambda: K.softmax_xent_backward_np(probs, targets, gout)),
        ("scatter_add_rows",
         (lambda: K.scatter_add_rows_nb(table, ids, rows)) if have_nb else None,
         lambda: K.scatter_add_rows_np(table, ids, rows)),
    ]
    for name, fn_nb, fn_np in pairs:
        bench_pair(name, fn_nb, fn_np, args.repeat)


if __name__ == "__main__":
    main()
