"""Time the compiled kernels against their numpy twins.

    python3 benchmarks/bench_backends.py [--repeat 5] [--json out.json] [--steps 50]

Kernel shapes match one training batch at default settings (32 windows of 20
steps, hidden width 64). ``--steps`` additionally times full training steps of
the default model in a subprocess per backend.
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from relamix import _fallback

try:
    from relamix import _kernels
except ImportError:
    _kernels = None

ROWS, WIDTH = 640, 64

STEP_SCRIPT = """
import time
from relamix import data as D, delay_sim as Z, model as M, trainer as T, kernels
clean = D.synth_series("gbm_ohlcv", 5000, 0)
cfg = M.ModelConfig()
prep = D.prepare(clean, Z.apply_zoh(clean, Z.generate_mask(len(clean), 0.25, 0)), cfg)
tc = T.TrainConfig(max_epochs=1, steps_per_epoch={steps})
mdl = T.build_model("relamix", cfg)
T.train(mdl, tc, prep.train, prep.val)  # warm-up
t = time.perf_counter()
T.train(mdl, tc, prep.train, prep.val)
print(kernels.NAME, (time.perf_counter() - t) / {steps})
"""


def cases(rng):
    x = rng.standard_normal((ROWS, WIDTH))
    a = rng.standard_normal((ROWS, 32))
    b = rng.standard_normal((32, WIDTH))
    g, beta = rng.standard_normal(WIDTH), rng.standard_normal(WIDTH)
    mask = (rng.random(100_000) >= 0.25).astype(np.uint8)
    mask[0] = 1
    series = rng.standard_normal((100_000, 5))
    return {
        "matmul 640x32x64": lambda k: k.matmul(a, b),
        "gelu_forward 640x64": lambda k: k.gelu_forward(x),
        "dropout_scale 640x64": lambda k: k.dropout_scale(x.shape, 0.1, 12345),
        "layernorm_forward 640x64": lambda k: k.layernorm_forward(x, g, beta, 1e-5),
        "layernorm_backward 640x64": lambda k: k.layernorm_backward(x, x, np.ones(ROWS), g),
        "zoh_hold 100000x5": lambda k: k.zoh_hold(series, mask),
        "zero_runs 100000": lambda k: k.zero_runs(mask),
    }


def best_of(fn, repeat):
    t = timeit.Timer(fn)
    n, _ = t.autorange()
    return min(t.repeat(repeat=repeat, number=n)) / n


def step_times(steps):
    out = {}
    for label, env in (("cython", {}), ("numpy", {"RELAMIX_PURE": "1"})):
        proc = subprocess.run(
            [sys.executable, "-c", STEP_SCRIPT.format(steps=steps)],
            env={**os.environ, **env}, capture_output=True, text=True, check=True,
        )
        name, sec = proc.stdout.split()
        out[label] = {"backend": name, "seconds_per_step": float(sec)}
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write results here")
    ap.add_argument("--steps", type=int, default=0, help="time this many training steps per backend")
    args = ap.parse_args(argv)

    if _kernels is None:
        print("compiled extension not built; only the numpy backend is available", file=sys.stderr)
    results = {}
    print(f"{'kernel':28s} {'numpy us':>10s} {'cython us':>10s} {'speedup':>8s}")
    for name, fn in cases(np.random.default_rng(0)).items():
        t_np = best_of(lambda: fn(_fallback), args.repeat)
        t_cy = best_of(lambda: fn(_kernels), args.repeat) if _kernels else float("nan")
        results[name] = {"numpy": t_np, "cython": t_cy}
        print(f"{name:28s} {t_np * 1e6:10.1f} {t_cy * 1e6:10.1f} {t_np / t_cy:8.2f}")
    if args.steps:
        results["training_step"] = step_times(args.steps)
        for label, r in results["training_step"].items():
            print(f"training step ({label:6s})      {r['seconds_per_step'] * 1e3:10.2f} ms")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2, sort_keys=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
