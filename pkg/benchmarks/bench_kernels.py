"""Time the compiled kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Each kernel runs once untimed so numba compilation is excluded.
"""

import argparse
import timeit

import numpy as np

from panfield import _accel
from panfield.autodiff import Tape
from panfield.encoding import _pe_nb, _pe_np, trilerp, trilerp_backward
from panfield.field import ParamStore
from panfield.optim import Adam
from panfield.rendering import weights_backward, weights_batch
from panfield.supervision import tv_loss


def cases(rng):
    sigma = rng.exponential(1.0, (4096, 48))
    t = np.sort(rng.uniform(1.6, 3.6, (4096, 48)), axis=1)
    tfar = np.full(4096, 3.6)
    w, _ = weights_batch(sigma, t, tfar)
    dw = rng.normal(size=w.shape)
    grid = rng.normal(size=(64, 64, 64, 2)).astype(np.float32)
    xc = rng.uniform(-2, 2, (200_000, 3))
    gout = rng.normal(size=(200_000, 2)).astype(np.float32)
    pts = rng.uniform(-2, 2, (200_000, 3))
    pe_out = np.empty((200_000, 24))
    tv_grid = rng.normal(size=(64, 64, 64, 2))
    store = ParamStore()
    store["geo_grid.l0"] = rng.normal(size=(64, 64, 64, 2)).astype(np.float32)
    store.grads = {"geo_grid.l0": rng.normal(size=(64, 64, 64, 2)).astype(np.float32)}

    def tv(flag):
        tape = Tape()
        tape.backward(tv_loss(tape.param(tv_grid), use_numba=flag))

    def adam(flag):
        opt = Adam(store, use_numba=flag)
        return opt.step

    adam_nb, adam_np = adam(True), adam(False)
    return {
        "weights (4096x48)": (lambda: weights_batch(sigma, t, tfar, use_numba=True),
                              lambda: weights_batch(sigma, t, tfar, use_numba=False)),
        "weights backward": (lambda: weights_backward(sigma, t, tfar, w, dw, use_numba=True),
                             lambda: weights_backward(sigma, t, tfar, w, dw, use_numba=False)),
        "trilerp 200k pts": (lambda: trilerp(grid, xc, 2.0, True), lambda: trilerp(grid, xc, 2.0, False)),
        "trilerp backward": (lambda: trilerp_backward(grid.shape, grid.dtype, xc, 2.0, gout, True),
                             lambda: trilerp_backward(grid.shape, grid.dtype, xc, 2.0, gout, False)),
        "positional enc 200k": (lambda: _pe_nb(pts, 4, pe_out), lambda: _pe_np(pts, 4, pe_out)),
        "tv 64^3x2": (lambda: tv(True), lambda: tv(False)),
        "adam 64^3x2": (adam_nb, adam_np),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not _accel.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<22}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}")
    for name, (fast, slow) in cases(rng).items():
        fast()
        slow()
        a = min(timeit.repeat(fast, number=1, repeat=args.repeat)) * 1e3
        b = min(timeit.repeat(slow, number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<22}{a:>10.2f}{b:>10.2f}{b / a:>8.1f}x")


if __name__ == "__main__":
    main()
