"""Benchmark the fused GRU kernel backends against each other.

Runs forward and forward+backward passes over a grid of sequence shapes
with both the pure-numpy recurrence and the compiled extension (when
available), reports best-of-``repeats`` wall time per call and the
speedup, and cross-checks that both backends agree to near machine
precision before timing anything.

Usage:
    python3 benchmarks/bench_gru.py [--repeats N] [--seed S]
"""

import argparse
import time

import numpy as np

from protoinfomax._kernels import gru_numpy

try:
    from protoinfomax._kernels import _gru_cy
except ImportError:
    _gru_cy = None

SHAPES = [  # (T, B, H)
    (16, 8, 32),
    (64, 16, 64),
    (64, 64, 100),
    (128, 64, 200),
]


def make_inputs(rng, t, b, h):
    xz, xr, xh = (rng.standard_normal((t, b, h)) for _ in range(3))
    h0 = rng.standard_normal((b, h))
    uz, ur, uh = (rng.standard_normal((h, h)) * (1.0 / np.sqrt(h)) for _ in range(3))
    lengths = rng.integers(1, t + 1, size=b)
    mask = (np.arange(t)[:, None] < lengths[None, :]).astype(np.float64)
    dh_all = rng.standard_normal((t, b, h))
    return (xz, xr, xh, h0, uz, ur, uh, mask), dh_all


def run_once(mod, inputs, dh_all, with_backward):
    xz, xr, xh, h0, uz, ur, uh, mask = inputs
    hs, (zs, rs, hts) = mod.gru_forward(xz, xr, xh, h0, uz, ur, uh, mask)
    if with_backward:
        mod.gru_backward(dh_all, hs, zs, rs, hts, h0, uz, ur, uh, mask)
    return hs


def best_time(mod, inputs, dh_all, with_backward, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        run_once(mod, inputs, dh_all, with_backward)
        best = min(best, time.perf_counter() - t0)
    return best


def check_agreement(inputs, dh_all):
    """Max |difference| between backends across all outputs."""
    xz, xr, xh, h0, uz, ur, uh, mask = inputs
    worst = 0.0
    out_np = gru_numpy.gru_forward(*inputs)
    out_cy = _gru_cy.gru_forward(*inputs)
    for a, b in zip((out_np[0], *out_np[1]), (out_cy[0], *out_cy[1])):
        worst = max(worst, float(np.abs(a - b).max()))
    back_np = gru_numpy.gru_backward(dh_all, out_np[0], *out_np[1], h0, uz, ur, uh, mask)
    back_cy = _gru_cy.gru_backward(dh_all, out_cy[0], *out_cy[1], h0, uz, ur, uh, mask)
    for a, b in zip(back_np, back_cy):
        worst = max(worst, float(np.abs(a - b).max()))
    return worst


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5, help="timing repeats; best is kept")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    rng = np.random.default_rng(args.seed)
    if _gru_cy is None:
        print("compiled extension not available; timing numpy backend only\n")

    header = f"{'shape (T,B,H)':>16} {'pass':>9} {'numpy':>12} {'cython':>12} {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for shape in SHAPES:
        inputs, dh_all = make_inputs(rng, *shape)
        if _gru_cy is not None:
            gap = check_agreement(inputs, dh_all)
            assert gap < 1e-12, f"backends disagree by {gap:.3e} at {shape}"
        for with_backward, label in ((False, "fwd"), (True, "fwd+bwd")):
            t_np = best_time(gru_numpy, inputs, dh_all, with_backward, args.repeats)
            row = f"{str(shape):>16} {label:>9} {t_np * 1e3:>10.2f}ms"
            if _gru_cy is not None:
                t_cy = best_time(_gru_cy, inputs, dh_all, with_backward, args.repeats)
                row += f" {t_cy * 1e3:>10.2f}ms {t_np / t_cy:>7.2f}x"
            print(row)


if __name__ == "__main__":
    main()
