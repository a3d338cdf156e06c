"""Micro-benchmark: JIT-compiled kernels vs the pure-numpy fallback.

Times the convolution kernels (the hot path) and one full generator/
discriminator update step under both backends, then prints a speedup table.

    python benchmarks/bench_kernels.py [--size 64] [--batch 4] [--repeats 5]

The first JIT call compiles; a warmup pass keeps compilation out of the
timings (the on-disk cache makes later runs cheap).
"""

import argparse
import time

import numpy as np

from uwgen.dataset import DomainDataset, DomainImage
from uwgen.nn import backend
from uwgen.nn.layers import Conv2d
from uwgen.trainer import TrainConfig, train_cyclegan


def time_fn(fn, repeats):
    fn()  # warmup: JIT compilation, cache touch
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_conv(size, batch, repeats):
    rng = np.random.default_rng(0)
    conv = Conv2d(8, 16, 3, pad=1)
    params = conv.init_params(rng)
    x = rng.standard_normal((batch, 8, size, size)).astype(np.float32)

    def fwd():
        conv.forward(params, x)

    def fwd_bwd():
        y, cache = conv.forward(params, x)
        conv.backward(params, cache, np.ones_like(y))

    return time_fn(fwd, repeats), time_fn(fwd_bwd, repeats)


def bench_train_step(size, batch, repeats):
    rng = np.random.default_rng(1)

    def make(domain, n):
        items = [
            DomainImage(source_id=f"{domain}{i}", domain=domain, provenance="real",
                        image=rng.random((size, size, 3)))
            for i in range(n)
        ]
        return DomainDataset(items=items)

    ds_uw, ds_lab = make("uw", batch), make("lab", batch)
    cfg = TrainConfig(image_size=size, batch_size=batch, epochs=1, seed=0,
                      base_channels=8, residual_blocks=1, disc_base_channels=8)

    def step():
        train_cyclegan(cfg, ds_uw, ds_lab)

    return time_fn(step, repeats)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--size", type=int, default=64)
    parser.add_argument("--batch", type=int, default=4)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    results = {}
    for name in ("numpy", "numba"):
        backend.set_backend(name)
        conv_f, conv_fb = bench_conv(args.size, args.batch, args.repeats)
        step = bench_train_step(args.size, args.batch, max(2, args.repeats // 2))
        results[name] = (conv_f, conv_fb, step)
        print(f"[{name}] conv fwd {conv_f * 1e3:8.2f} ms   "
              f"conv fwd+bwd {conv_fb * 1e3:8.2f} ms   "
              f"train step {step:8.3f} s")
    backend.set_backend(None)

    np_f, np_fb, np_s = results["numpy"]
    nb_f, nb_fb, nb_s = results["numba"]
    print(f"\nspeedup (numpy/numba): conv fwd {np_f / nb_f:5.1f}x   "
          f"conv fwd+bwd {np_fb / nb_fb:5.1f}x   train step {np_s / nb_s:5.1f}x")


if __name__ == "__main__":
    main()
