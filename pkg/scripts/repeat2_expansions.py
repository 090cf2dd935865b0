"""Compare decode-time expansion histograms of vanilla and CTC-regularized models on repeat2."""

import argparse

from tlab.experiments import ctc_direction


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--ctc", type=float, default=0.5)
    ap.add_argument("--epochs", type=int, default=15)
    args = ap.parse_args()
    cmp = ctc_direction(seeds=range(args.seeds), ctc_weight=args.ctc, epochs=args.epochs)
    print("seed  model    1      2      3+     raw-1  acc    cer")
    for seed, v, a in zip(cmp.seeds, cmp.vanilla, cmp.auxiliary):
        for tag, r in (("vanilla", v), ("ctc", a)):
            pct = "  ".join(f"{p:5.1f}" for _, p in r.table)
            print(f"{seed:4d}  {tag:7s}  {pct}  {r.raw_one_share:5.1f}  {r.accuracy:.3f}  {r.cer:.3f}")
    print(f"1-expansion share higher with ctc in {cmp.wins}/{len(cmp.seeds)} seeds")


if __name__ == "__main__":
    main()
