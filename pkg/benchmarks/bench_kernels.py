"""Compare the compiled and pure-numpy path-sampling kernels.

Usage: python3 benchmarks/bench_kernels.py [--paths N] [--steps N] [--repeat R]
"""
import argparse
import time

import numpy as np

from levyrisk import _backend
from levyrisk.market import JumpAtom, MarketModel, _poisson_cdf_table


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--paths", type=int, default=100_000)
    ap.add_argument("--steps", type=int, default=100)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    py = _backend.python_kernels
    cc = _backend.compiled_kernels
    key = _backend.seed_key(7)
    n, c = args.paths, 2 * args.steps
    tab = _poisson_cdf_table(2.0 / args.steps)
    print(f"active backend: {_backend.BACKEND}; {n} paths x {c} counters")
    rows = []
    t_py, u_py = best_of(lambda: py.counter_uniforms(key, 0, n, c), args.repeat)
    k_py_t, k_py = best_of(lambda: py.poisson_lookup(u_py.ravel(), tab), args.repeat)
    rows.append(("counter_uniforms", t_py))
    rows.append(("poisson_lookup", k_py_t))
    if cc is None:
        for name, t in rows:
            print(f"{name:18s} python {t * 1e3:9.1f} ms   compiled: not built")
        return
    t_cc, u_cc = best_of(lambda: cc.counter_uniforms(key, 0, n, c), args.repeat)
    k_cc_t, k_cc = best_of(lambda: cc.poisson_lookup(u_cc.ravel(), tab), args.repeat)
    same = np.array_equal(u_py, u_cc) and np.array_equal(k_py, k_cc)
    for (name, tp), tc in zip(rows, (t_cc, k_cc_t)):
        print(f"{name:18s} python {tp * 1e3:9.1f} ms   compiled {tc * 1e3:9.1f} ms   speedup {tp / tc:5.1f}x")
    print(f"outputs bit-identical: {same}")

    model = MarketModel(n_steps=args.steps, atoms=(JumpAtom(1.0, 2.0, 0.1),))
    from levyrisk import market
    for label, kern in (("python", py), ("compiled", cc)):
        market.kernels = kern
        t, _ = best_of(lambda: market.simulate(model, n, 7), args.repeat)
        print(f"simulate ({label:8s}) {t * 1e3:9.1f} ms")
    market.kernels = _backend.kernels


if __name__ == "__main__":
    main()
