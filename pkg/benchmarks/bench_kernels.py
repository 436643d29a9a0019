"""Compiled vs numpy kernels, alone and inside a training step and a ladder run.

    python3 benchmarks/bench_kernels.py [--repeat 5]

The backends are swapped by rebinding the functions on ``ladder.kernels``,
which is where every caller looks them up.
"""
import argparse
import contextlib
import time

import numpy as np
from threadpoolctl import threadpool_limits

from ladder import _kernels_py, kernels
from ladder.loop import LadderConfig, NetPredictor, ladder_step
from ladder.neural import AdamConfig, get_preset, init_params
from ladder.synth import PRESETS, generate_dataset
from ladder.training import AugmentConfig, build_batch, example_index, train_step

try:
    from ladder import _ckernels
except ImportError:
    _ckernels = None

NAMES = ["im2col3x3", "col2im3x3", "maxpool2x2_forward", "maxpool2x2_backward", "resample_bicubic", "convolve1d_reflect"]


@contextlib.contextmanager
def backend(mod):
    saved = {n: getattr(kernels, n) for n in NAMES}
    for n in NAMES:
        setattr(kernels, n, getattr(mod, n))
    try:
        yield
    finally:
        for n, f in saved.items():
            setattr(kernels, n, f)


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(32, 8, 56, 56)).astype(np.float32)
    cols = rng.normal(size=(32 * 56 * 56, 8 * 9)).astype(np.float32)
    pooled, arg = _kernels_py.maxpool2x2_forward(x)
    img = rng.random((608, 128))
    k = np.exp(-0.5 * (np.arange(-45, 46) / 15.0) ** 2)
    k /= k.sum()
    patch = rng.random((140, 140))
    return {
        "im2col3x3 (32x8x56x56)": lambda m: m.im2col3x3(x),
        "col2im3x3 (32x8x56x56)": lambda m: m.col2im3x3(cols, 32, 8, 56, 56),
        "maxpool fwd (32x8x56x56)": lambda m: m.maxpool2x2_forward(x),
        "maxpool bwd (32x8x56x56)": lambda m: m.maxpool2x2_backward(pooled, arg, 56, 56),
        "bicubic 608x128 -> 224x224": lambda m: m.resample_bicubic(img, 224, 224, 100.3, 0.7, 10.2, 0.5, False),
        "blur sigma 15, 140x140": lambda m: m.convolve1d_reflect(m.convolve1d_reflect(patch, k, 0), k, 1),
    }


def pipeline_cases():
    cfg = get_preset("desk")
    samples = generate_dataset(8, PRESETS["lumbar-like"], seed=0)
    pairs = example_index(samples)[:32]
    aug = AugmentConfig()
    test = generate_dataset(1, PRESETS["wholespine-like"], seed=1)[0]
    params = init_params(cfg, seed=0)

    def step():
        xs, ys = build_batch(samples, pairs, cfg.input_size, aug, seed=0, epoch=1)
        train_step(cfg, params.copy(), xs, ys, AdamConfig())

    pred, lcfg = NetPredictor(cfg, params), LadderConfig(23, patch_size=cfg.input_size)

    def ladder():
        # one step per ground-truth proposal: same work as a full run without depending on a trained net
        for q in test.annotation.quads:
            try:
                ladder_step(test.image, q, pred, lcfg)
            except Exception:
                pass

    return {"train step (batch 32, augmented)": step, "ladder, 23 steps": ladder}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _ckernels is None:
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation`")
    rows = []
    with threadpool_limits(limits=1):
        for name, fn in kernel_cases().items():
            py = best_of(lambda: fn(_kernels_py), args.repeat)
            cy = best_of(lambda: fn(_ckernels), args.repeat)
            rows.append((name, py, cy))
        for name, fn in pipeline_cases().items():
            with backend(_kernels_py):
                py = best_of(fn, args.repeat)
            with backend(_ckernels):
                cy = best_of(fn, args.repeat)
            rows.append((name, py, cy))
    w = max(len(r[0]) for r in rows)
    print(f"{'case':<{w}}  {'numpy ms':>9}  {'cython ms':>9}  {'speedup':>7}")
    for name, py, cy in rows:
        print(f"{name:<{w}}  {1e3 * py:9.2f}  {1e3 * cy:9.2f}  {py / cy:6.1f}x")


if __name__ == "__main__":
    main()
