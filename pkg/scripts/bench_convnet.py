"""Throughput of the numpy ConvNet: forward and training step per sample."""
import argparse
import time

import numpy as np

from spinecade.convnet import MICRO_BATCH, ConvNetModel


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--net", default="desk64")
    ap.add_argument("--n", type=int, default=64)
    args = ap.parse_args()

    model = ConvNetModel.build(args.net, seed=0)
    x = np.random.default_rng(0).random((args.n, 3, 64, 64)).astype(np.float32)
    y = np.arange(args.n) % 2
    print(f"{args.net}: {model.n_parameters():,} parameters")

    t0 = time.perf_counter()
    model.predict_proba(x)
    fwd = (time.perf_counter() - t0) / args.n
    t0 = time.perf_counter()
    model.training_mode = True
    for s in range(0, args.n, MICRO_BATCH):
        model.loss_and_grads(x[s : s + MICRO_BATCH], y[s : s + MICRO_BATCH])
    step = (time.perf_counter() - t0) / args.n
    print(f"forward {fwd * 1e3:.2f} ms/sample, forward+backward {step * 1e3:.2f} ms/sample")


if __name__ == "__main__":
    main()
