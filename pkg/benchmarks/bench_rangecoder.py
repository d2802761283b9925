"""Throughput of the compiled range coder against the pure-Python fallback.

    python3 benchmarks/bench_rangecoder.py --symbols 50000
"""
import argparse
import time

import numpy as np

from caesr.entropy import gmm
from caesr.entropy.rangecoder import compiled_backend, python_backend


def make_workload(n, seed):
    rng = np.random.default_rng(seed)
    k = 3
    w = rng.dirichlet(np.ones(k), size=n).T
    mu = rng.uniform(-4, 4, (k, n))
    sigma = rng.uniform(0.2, 6, (k, n))
    cdfs = gmm.build_cdf(w, mu, sigma)
    symbols = np.clip(np.round(mu[0] + sigma[0] * rng.standard_normal(n)), -128, 127).astype(np.int64)
    return gmm.symbol_to_bucket(symbols), cdfs


def bench(backend, buckets, cdfs, repeats):
    best_enc = best_dec = float("inf")
    data = b""
    for _ in range(repeats):
        t = time.perf_counter()
        enc = backend.RangeEncoder()
        enc.encode(buckets, cdfs)
        data = enc.finish()
        best_enc = min(best_enc, time.perf_counter() - t)
        t = time.perf_counter()
        out = backend.RangeDecoder(data).decode(cdfs)
        best_dec = min(best_dec, time.perf_counter() - t)
        assert np.array_equal(out, buckets)
    return data, best_enc, best_dec


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--symbols", type=int, default=50_000)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    buckets, cdfs = make_workload(args.symbols, args.seed)
    backends = [("python", python_backend)]
    compiled = compiled_backend
    if compiled is not None:
        backends.insert(0, ("cython", compiled))
    else:
        print("compiled extension not built; timing the fallback only")
    results = {}
    for name, backend in backends:
        data, te, td = bench(backend, buckets, cdfs, args.repeats)
        results[name] = (data, te, td)
        n = args.symbols
        print(f"{name:>7s}: {len(data):8d} bytes  encode {n / te / 1e6:7.3f} Msym/s  "
              f"decode {n / td / 1e6:7.3f} Msym/s")
    if len(results) == 2:
        same = results["cython"][0] == results["python"][0]
        print(f"identical streams: {same}  speedup encode x{results['python'][1] / results['cython'][1]:.1f} "
              f"decode x{results['python'][2] / results['cython'][2]:.1f}")


if __name__ == "__main__":
    main()
