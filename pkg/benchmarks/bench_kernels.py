"""Time the numba pixel kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py --size 224 --repeats 20

Both implementations are imported side by side, so the env flag does not
matter here. Each pair is also checked for bit-identical output.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import statistics
import time

import numpy as np

from capsule import _accel
from capsule.augment import affine_inverse, gaussian_taps

logger = logging.getLogger("bench_kernels")


def _time(fn, repeats: int) -> float:
    fn()  # warm-up, includes JIT compilation for the numba path
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def cases(size: int, seed: int):
    rng = np.random.default_rng(seed)
    img = rng.random((size, size, 3), dtype=np.float32) * 255
    taps = gaussian_taps(7)
    inv = affine_inverse(size, size, 30.0, 1.05, 0.05 * size, -0.03 * size)
    n = 10
    t = rng.integers(0, n, size * size)
    p = rng.integers(0, n, size * size)
    return {
        "gaussian_blur": (lambda: _accel.blur_numpy(img, taps), lambda: _accel.blur_numba(img, taps)),
        "affine_warp": (lambda: _accel.warp_numpy(img, inv, 0.0), lambda: _accel.warp_numba(img, inv, 0.0)),
        "hue_shift": (lambda: _accel.hue_shift_numpy(img, 0.07), lambda: _accel.hue_shift_numba(img, 0.07)),
        "confusion": (lambda: _accel.confusion_numpy(t, p, n), lambda: _accel.confusion_numba(t, p, n)),
    }


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=224, help="square image side in pixels")
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", help="also write results to this file")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    if not _accel.HAVE_NUMBA:
        logger.error("numba is not installed; nothing to compare")
        return 1

    results = {}
    print(f"{'kernel':<14} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}  identical")
    for name, (np_fn, nb_fn) in cases(args.size, args.seed).items():
        same = np.array_equal(np_fn(), nb_fn())
        t_np, t_nb = _time(np_fn, args.repeats), _time(nb_fn, args.repeats)
        speedup = t_np / t_nb if t_nb > 0 else math.inf
        results[name] = {"numpy_ms": 1e3 * t_np, "numba_ms": 1e3 * t_nb, "speedup": speedup, "identical": same}
        print(f"{name:<14} {1e3 * t_np:>10.3f} {1e3 * t_nb:>10.3f} {speedup:>7.1f}x  {same}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"size": args.size, "repeats": args.repeats, "results": results}, fh, indent=2)
    return 0 if all(r["identical"] for r in results.values()) else 1


if __name__ == "__main__":
    raise SystemExit(main())
