"""Cumulative auxiliary-task ablation on noisy repeat2."""

import argparse

from tlab.experiments import ablation


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=10)
    args = ap.parse_args()
    for name, cer, acc in ablation(seed=args.seed, epochs=args.epochs):
        print(f"{name:12s} CER {100 * cer:6.2f}%  greedy acc {acc:.3f}")


if __name__ == "__main__":
    main()
