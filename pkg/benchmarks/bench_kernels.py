"""Compare the compiled and pure-Python kernels.

Usage: python3 benchmarks/bench_kernels.py [--repeat 3]
"""
import argparse
import time

import numpy as np

from qndtraj import kernels
from qndtraj.conditioned import doleans_log_q
from qndtraj.filter import filter_q_diag
from qndtraj.model import QndModel, embed
from qndtraj.qdyn import diagonal_state, simulate_q_diag, simulate_trajectory

MODEL = QndModel.from_arrays(diffusive=[[1, -1, 0.5]], counting=[[2, 1, 1.5]])
Q0 = np.array([0.2, 0.3, 0.5])


def cases(backend):
    tr = simulate_q_diag(MODEL, Q0, 10, 1e-3, seed=0)
    dW = tr.record.dy - (tr.q[:-1] @ MODEL.r.T) * 1e-3
    return {
        "populations T=10": lambda: simulate_q_diag(MODEL, Q0, 10, 1e-3, seed=1, backend=backend),
        "filter T=10": lambda: filter_q_diag(MODEL, tr.record, [1 / 3] * 3, 1e-3, backend=backend),
        "doleans T=10": lambda: doleans_log_q(MODEL, Q0, dW, tr.record.jumps, 1e-3, backend=backend),
        "full SME T=2": lambda: simulate_trajectory(embed(MODEL), diagonal_state(Q0), 2, 1e-3, seed=1,
                                                    backend=backend),
    }


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    backends = ["python"] + (["cython"] if kernels.compiled is not None else [])
    results = {b: {k: best_of(f, args.repeat) for k, f in cases(b).items()} for b in backends}
    print(f"{'case':<20}" + "".join(f"{b:>12}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for case in results["python"]:
        row = f"{case:<20}" + "".join(f"{results[b][case] * 1e3:>10.1f}ms" for b in backends)
        if len(backends) > 1:
            row += f"{results['python'][case] / results['cython'][case]:>11.0f}x"
        print(row)


if __name__ == "__main__":
    main()
