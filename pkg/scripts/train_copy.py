"""Vanilla transducer on the noiseless copy task; prints held-out accuracy per epoch."""

import argparse

from tlab.experiments import copy_task


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--batch-size", type=int, default=4)
    args = ap.parse_args()
    run = copy_task(seed=args.seed, epochs=args.epochs, lr=args.lr, batch_size=args.batch_size)
    for e in run.logs:
        print(f"epoch {e.epoch:3d}  l_trans {e.losses.l_trans:9.5f}  greedy acc {e.greedy_seq_acc:.3f}")
    print(f"{run.seconds:.1f}s total; first epoch at >= 0.95: {run.epochs_to(0.95)}")


if __name__ == "__main__":
    main()
