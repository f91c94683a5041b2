"""Compare the compiled and pure-Python kernel backends.

    python benchmarks/bench_kernels.py [--repeat N]

Each kernel runs on inputs shaped like the acceptance workload (128x128
scenes, 32x32 dense maps). Outputs of the two backends are checked for
equality before timing. The last row times one full model forward pass,
which is dominated by torch and does not depend on the backend.
"""
import argparse
import timeit

import numpy as np

from redundet import _pykernels


def workloads(rng):
    depth = rng.random((128, 128))
    invalid = np.zeros((128, 128), bool)
    invalid[40:52, 30:90] = True
    invalid[rng.random((128, 128)) < 0.05] = True

    classes = np.where(rng.random((32, 32)) < 0.4, rng.integers(0, 3, (32, 32)), -1)

    def runs(p):
        flat = np.flatnonzero(rng.random(128 * 128) < p)
        return np.stack([flat, np.ones_like(flat)], axis=1)

    ra, rb = runs(0.3), runs(0.3)
    ious = rng.random((60, 40))

    return {
        "diffusion_fill (128x128)": ("diffusion_fill", (depth, invalid)),
        "label_components (32x32)": ("label_components", (classes,)),
        "rle_intersection (~5k runs)": ("rle_intersection", (ra, rb)),
        "greedy_match (60x40)": ("greedy_match", (ious, 0.5)),
    }


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.array_equal(np.asarray(a), np.asarray(b))


def best_time(fn, args, repeat):
    timer = timeit.Timer(lambda: fn(*args))
    number, _ = timer.autorange()
    return min(timer.repeat(repeat, number)) / number


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    try:
        from redundet import _ckernels
    except ImportError:
        _ckernels = None
        print("compiled extension not built; timing the Python backend only")

    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<30} {'python':>12} {'cython':>12} {'speedup':>9}")
    for name, (fn_name, fargs) in workloads(rng).items():
        py_fn = getattr(_pykernels, fn_name)
        t_py = best_time(py_fn, fargs, args.repeat)
        if _ckernels is None:
            print(f"{name:<30} {t_py * 1e3:>10.3f}ms {'-':>12} {'-':>9}")
            continue
        c_fn = getattr(_ckernels, fn_name)
        if not _same(py_fn(*fargs), c_fn(*fargs)):
            raise SystemExit(f"{fn_name}: backends disagree")
        t_c = best_time(c_fn, fargs, args.repeat)
        print(f"{name:<30} {t_py * 1e3:>10.3f}ms {t_c * 1e3:>10.3f}ms {t_py / t_c:>8.1f}x")

    import torch

    from redundet.model import Detector, forward

    torch.set_num_threads(1)
    model = Detector().eval()
    rgb, depth = rng.random((128, 128, 3)), rng.random((128, 128))
    t = best_time(forward, (model, rgb, depth), args.repeat)
    print(f"{'model forward (torch)':<30} {t * 1e3:>10.3f}ms  (backend independent)")


if __name__ == "__main__":
    main()
