"""Compare the compiled and pure-Python kernel backends.

    python benchmarks/bench_kernels.py [--dims 240 240 155] [--repeat 5]

Prints the median wall time per kernel and backend, plus the end-to-end
postprocess + evaluate time for one phantom case under each backend.
"""
import argparse
import statistics
import time

import numpy as np

from tumorpipe import kernels
from tumorpipe.phantom import PhantomSpec, generate


def timed(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dims", type=int, nargs=3, default=(240, 240, 155))
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--density", type=float, default=0.05, help="foreground fraction of the random mask")
    args = ap.parse_args(argv)

    rng = np.random.default_rng(0)
    mask = rng.random(args.dims) < args.density
    ph = generate(PhantomSpec(dims=tuple(args.dims), n_lesions=3, wt_radius=(12, 22), tc_radius=(6, 12),
                              et_radius=(3, 6), n_spurious=6, spurious_size=(5, 60), noise_rate=0.05, seed=1))
    if "cython" not in kernels.BACKENDS:
        print("compiled backend not available; build with `pip install -e . --no-build-isolation`")

    rows = []
    for name, impl in sorted(kernels.BACKENDS.items()):
        rows.append((name, "label_components(26)", timed(lambda: impl.label_components(mask, 26), args.repeat)))
        rows.append((name, "label_components(6)", timed(lambda: impl.label_components(mask, 6), args.repeat)))
        rows.append((name, "dilate_cube(r=3)", timed(lambda: impl.dilate_cube(mask, 3), args.repeat)))
        rows.append((name, "postprocess+evaluate", timed(lambda: _case(impl, ph), max(1, args.repeat // 2))))

    print(f"dims {tuple(args.dims)}, density {args.density}, median of {args.repeat}")
    print(f"{'backend':<8} {'kernel':<22} {'seconds':>9}")
    for name, kernel, t in rows:
        print(f"{name:<8} {kernel:<22} {t:9.4f}")
    if "cython" in kernels.BACKENDS:
        by = {(n, k): t for n, k, t in rows}
        for k in dict.fromkeys(k for _, k, _ in rows):
            print(f"speedup {k:<22} {by[('python', k)] / by[('cython', k)]:6.2f}x")


def _case(impl, ph):
    from tumorpipe import metrics, postprocess

    saved = (kernels.label_components, kernels.dilate_cube)
    kernels.label_components, kernels.dilate_cube = impl.label_components, impl.dilate_cube
    try:
        cleaned = postprocess.postprocess(ph.pred, postprocess.PRESETS["ped"])
        metrics.evaluate_case(cleaned, ph.gt)
    finally:
        kernels.label_components, kernels.dilate_cube = saved


if __name__ == "__main__":
    main()
