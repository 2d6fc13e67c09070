"""Compare the compiled episode-head kernels with the numpy fallback.

Usage::

    python3 benchmarks/bench_kernels.py [--repeat 200] [--episode]

Each kernel runs on inputs shaped like a training episode (queries x
prototypes x embedding size). ``--episode`` also times a full forward and
backward pass of the ``select`` variant under each backend, in a subprocess
so the backend is chosen at import as in normal use.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from selectproto.kernels import available_backends

SHAPES = [(75, 5, 16), (150, 10, 16), (600, 20, 64)]

EPISODE_SNIPPET = """
import timeit
from selectproto import kernels
from selectproto.data import GenConfig, generate_synthetic, split_classes, sample_episode
from selectproto.model import ModelBundle, episode_loss
from selectproto.diffcore import backward
ds = split_classes(generate_synthetic(GenConfig(num_classes=30, irrelevant_dims={irr})), (0.6, 0.2, 0.2), 0)
ep = sample_episode(ds, "train", 5, 5, 15, 0)
b = ModelBundle.build("select", ds.feature_dim, seed=0)
def step():
    b.zero_grad()
    backward(episode_loss(b, ep))
t = min(timeit.repeat(step, number={number}, repeat=5)) / {number}
print(kernels.BACKEND, t)
"""


def make_inputs(m, n, e, rng):
    z = rng.normal(size=(m, e))
    protos = rng.normal(size=(n, e))
    y = rng.integers(0, n, size=m).astype(np.int64)
    w = rng.uniform(0.1, 1.0, size=m)
    return z, protos, y, w


def bench_kernels(repeat: int) -> None:
    rng = np.random.default_rng(0)
    backends = available_backends()
    if "cython" not in backends:
        print("compiled extension not importable; only the numpy fallback is available")
    print(f"{'kernel':<28}{'shape':<16}" + "".join(f"{b:>12}" for b in backends) + f"{'speedup':>10}")
    for m, n, e in SHAPES:
        z, protos, y, w = make_inputs(m, n, e, rng)
        d = backends["python"].pairwise_sqdist(z, protos)
        g = rng.normal(size=d.shape)
        gp = rng.normal(size=(n, e))
        cases = {
            "pairwise_sqdist": lambda k: k.pairwise_sqdist(z, protos),
            "pairwise_sqdist_backward": lambda k: k.pairwise_sqdist_backward(z, protos, g),
            "proto_xent": lambda k: k.proto_xent(d, y),
            "segment_weighted_mean": lambda k: k.segment_weighted_mean(z, w, y, n, False),
            "segment_weighted_mean_bwd": lambda k: k.segment_weighted_mean_backward(z, w, y, n, gp, False),
        }
        for name, fn in cases.items():
            times = {}
            for bname, mod in backends.items():
                times[bname] = min(timeit.repeat(lambda: fn(mod), number=repeat, repeat=3)) / repeat
            cols = "".join(f"{1e6 * times[b]:>10.2f}us" for b in backends)
            speed = times["python"] / times["cython"] if "cython" in times else float("nan")
            print(f"{name:<28}{f'{m}x{n}x{e}':<16}{cols}{speed:>9.2f}x")


def bench_episode(irr: int, number: int) -> None:
    print(f"\nfull select-variant forward+backward, 5-way 5-shot q=15, p={20 + irr}")
    for env in ({}, {"SELECTPROTO_PURE_PYTHON": "1"}):
        out = subprocess.run([sys.executable, "-c", EPISODE_SNIPPET.format(irr=irr, number=number)],
                             env={**os.environ, **env}, capture_output=True, text=True, check=True)
        backend, t = out.stdout.split()
        print(f"  {backend:<8}{1e3 * float(t):8.3f} ms/episode")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200, help="calls per timing (default: 200)")
    ap.add_argument("--episode", action="store_true", help="also time a full training step (default: off)")
    ap.add_argument("--irrelevant", type=int, default=100, help="irrelevant dims for --episode (default: 100)")
    args = ap.parse_args()
    bench_kernels(args.repeat)
    if args.episode:
        bench_episode(args.irrelevant, 50)


if __name__ == "__main__":
    main()
