#!/usr/bin/env python3
"""Benchmark the compiled kernel core against the numpy fallback.

Per-op timings cover the shapes the training stack actually hits (both
dictionary depths of the shipped configs), followed by an end-to-end
training-step comparison run in subprocesses so each backend is selected
at import as it would be in production.

The numpy fallback routes 3x3 convolutions through BLAS (tensordot over
im2col windows), so it can beat the compiled loops on channel-heavy
shapes; the compiled core wins on large-spatial shapes and on all the
2x2 strided ops. Run this to see the trade on your machine.
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import time

import numpy as np

# conv3x3 cases: (label, x shape, w shape)
CONV_CASES = [
    ("bottom 16ch 8x8", (16, 16, 8, 8), (16, 16, 3, 3)),
    ("mix 32->16 16x16", (16, 32, 16, 16), (16, 32, 3, 3)),
    ("mix 8->4 32x32", (16, 8, 32, 32), (4, 8, 3, 3)),
    ("mix 16->8 64x64", (8, 16, 64, 64), (8, 16, 3, 3)),
]
# tconv2x2 cases: (label, x shape, v shape (out, in, 2, 2))
TCONV_CASES = [
    ("lift 16->8 8x8", (16, 16, 8, 8), (8, 16, 2, 2)),
    ("lift 8->4 16x16", (16, 8, 16, 16), (4, 8, 2, 2)),
    ("lift 16->8 32x32", (8, 16, 32, 32), (8, 16, 2, 2)),
]


def _time(fn, *args, reps: int) -> float:
    fn(*args)
    t0 = time.perf_counter()
    for _ in range(reps):
        fn(*args)
    return (time.perf_counter() - t0) / reps * 1e6


def bench_ops(reps: int, dtype) -> None:
    from musc.kernels import have_compiled, reference

    if have_compiled():
        from musc.kernels import _core as compiled
    else:
        compiled = None
        print("compiled core not built; showing numpy fallback only\n", file=sys.stderr)

    gen = np.random.default_rng(0)
    rows = []

    def add(op_name, label, ref_fn, core_fn, *args):
        t_ref = _time(ref_fn, *args, reps=reps)
        if core_fn is None:
            rows.append((op_name, label, t_ref, float("nan")))
            return
        t_core = _time(core_fn, *args, reps=reps)
        rows.append((op_name, label, t_ref, t_core))

    for label, xs, ws in CONV_CASES:
        x = gen.standard_normal(xs).astype(dtype)
        w = gen.standard_normal(ws).astype(dtype)
        dy = gen.standard_normal((xs[0], ws[0], xs[2], xs[3])).astype(dtype)
        add("conv3x3", label, reference.conv3x3, getattr(compiled, "conv3x3", None), x, w)
        add(
            "conv3x3_grad_kernel",
            label,
            reference.conv3x3_grad_kernel,
            getattr(compiled, "conv3x3_grad_kernel", None),
            x,
            dy,
        )
    for label, xs, vs in TCONV_CASES:
        x = gen.standard_normal(xs).astype(dtype)
        v = gen.standard_normal(vs).astype(dtype)
        y = gen.standard_normal((xs[0], vs[0], 2 * xs[2], 2 * xs[3])).astype(dtype)
        add("tconv2x2", label, reference.tconv2x2, getattr(compiled, "tconv2x2", None), x, v)
        add(
            "tconv2x2_adjoint",
            label,
            reference.tconv2x2_adjoint,
            getattr(compiled, "tconv2x2_adjoint", None),
            y,
            v,
        )
        add(
            "tconv2x2_grad_kernel",
            label,
            reference.tconv2x2_grad_kernel,
            getattr(compiled, "tconv2x2_grad_kernel", None),
            x,
            y,
        )

    print(f"{'op':22s} {'shape':18s} {'numpy us':>10s} {'compiled us':>12s} {'speedup':>8s}")
    for op_name, label, t_ref, t_core in rows:
        ratio = t_ref / t_core if t_core == t_core else float("nan")
        print(f"{op_name:22s} {label:18s} {t_ref:10.1f} {t_core:12.1f} {ratio:8.2f}x")


def time_training_step(steps: int = 30) -> float:
    """Mean forward+backward+update time (ms) under the active backend."""
    from musc.data import TaskSpec, gen_corpus
    from musc.linops import ScaleSpec
    from musc.model import AdamState, adam_step, backward, forward, init_model
    from musc.rng import BATCH, stream

    spec = ScaleSpec(scales=2, channels=16, height=8, width=8)
    task = TaskSpec(task="streaks", size=32, n_train=64, n_val=8, n_test=8, seed=0)
    train = gen_corpus(task)["train"]
    model = init_model(spec, steps=5, seed=0)
    opt = AdamState.init(model, lr=5e-4)
    gen = stream(0, BATCH)

    def one():
        idx = gen.integers(0, len(train), size=16)
        batch = (train.corrupted[idx], train.clean[idx])
        state = forward(model, batch[0])
        grads = backward(model, state.tape, batch)
        adam_step(model, grads, opt)

    one()
    t0 = time.perf_counter()
    for _ in range(steps):
        one()
    return (time.perf_counter() - t0) / steps * 1e3


def bench_step() -> None:
    print("\nend-to-end training step (32x32 streaks, 2 scales, 16 channels, K=5):")
    for pure, label in ((0, "compiled"), (1, "numpy")):
        env = dict(os.environ, MUSC_PURE_PY=str(pure))
        out = subprocess.run(
            [sys.executable, os.path.abspath(__file__), "--step-worker"],
            env=env,
            capture_output=True,
            text=True,
            check=True,
        )
        print(f"  {label:9s} {float(out.stdout.strip()):7.1f} ms/step")


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--reps", type=int, default=100)
    parser.add_argument("--dtype", choices=("f32", "f64"), default="f32")
    parser.add_argument("--skip-step", action="store_true", help="per-op table only")
    parser.add_argument("--step-worker", action="store_true", help=argparse.SUPPRESS)
    args = parser.parse_args()

    if args.step_worker:
        print(f"{time_training_step():.3f}")
        return 0

    from musc.kernels import backend

    print(f"active backend: {backend()}  (MUSC_PURE_PY=1 forces the numpy fallback)\n")
    bench_ops(args.reps, np.float32 if args.dtype == "f32" else np.float64)
    if not args.skip_step:
        bench_step()
    return 0


if __name__ == "__main__":
    sys.exit(main())
