"""Benchmark the compositing-weight kernel: compiled backend vs pure torch.

The kernel computes per-sample transmittance weights
``w_i = T_i (1 - exp(-sigma_i delta_i))`` and their gradient with respect to
``sigma``. Run with::

    python benchmarks/bench_compositing.py [--rays 4096] [--samples 64]
"""

import argparse
import time

import torch

from portraitnerf.compositing import (backend_name, render_weights_cython,
                                      render_weights_torch)


def bench(fn, sigma, delta, repeats):
    # Warm up once so allocation and JIT-ish costs fall out of the timing.
    warm = sigma.detach().requires_grad_(True)
    fn(warm, delta).sum().backward()
    fwd = bwd = 0.0
    for _ in range(repeats):
        s = sigma.detach().requires_grad_(True)
        t0 = time.perf_counter()
        w = fn(s, delta)
        t1 = time.perf_counter()
        w.sum().backward()
        t2 = time.perf_counter()
        fwd += t1 - t0
        bwd += t2 - t1
    return fwd / repeats, bwd / repeats


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--rays", type=int, default=4096)
    parser.add_argument("--samples", type=int, default=64)
    parser.add_argument("--repeats", type=int, default=50)
    args = parser.parse_args()

    gen = torch.Generator().manual_seed(0)
    sigma = torch.rand(args.rays, args.samples, generator=gen,
                       requires_grad=True) * 3.0
    delta = torch.full((args.rays, args.samples), 3.0 / args.samples)

    print(f"rays={args.rays} samples={args.samples} repeats={args.repeats} "
          f"(dispatcher currently selects: {backend_name()})")

    backends = [("pure-torch", render_weights_torch)]
    try:
        render_weights_cython(sigma.detach(), delta)
        backends.append(("compiled", render_weights_cython))
    except RuntimeError as e:
        print(f"compiled backend unavailable: {e}")

    results = {}
    for name, fn in backends:
        fwd, bwd = bench(fn, sigma, delta, args.repeats)
        results[name] = (fwd, bwd)
        print(f"{name:>11}: forward {fwd * 1e3:8.3f} ms   "
              f"backward {bwd * 1e3:8.3f} ms")

    if len(results) == 2:
        pf, pb = results["pure-torch"]
        cf, cb = results["compiled"]
        print(f"{'speedup':>11}: forward {pf / cf:7.2f}x    "
              f"backward {pb / cb:7.2f}x")
        w_pure = render_weights_torch(sigma.detach(), delta)
        w_comp = render_weights_cython(sigma.detach(), delta)
        print(f"max |pure - compiled| = {(w_pure - w_comp).abs().max():.3e}")


if __name__ == "__main__":
    main()
