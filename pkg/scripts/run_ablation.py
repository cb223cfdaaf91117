"""Link-type and prediction-head ablation on the correlated-limbs benchmark.

Trains S-links L=1, S-links L=2, AS-links L=2 and AS-links L=2 with the
prediction head for every seed, then prints mean test accuracy per variant.
The defaults match the acceptance grid (five seeds, 200 samples per class,
roughly half an hour on one core).

    python3 scripts/run_ablation.py runs/ablation --seeds 0,1
"""
import argparse
from pathlib import Path

from asgcn.ablation import LINK_TREND, PRED_TREND, BenchConfig, run_ablation, summarize


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("out", type=Path)
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--samples-per-class", type=int, default=200)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--aim-epochs", type=int, default=5)
    ap.add_argument("--no-pred", action="store_true", help="skip the prediction-head variant")
    args = ap.parse_args()

    bench = BenchConfig(samples_per_class=args.samples_per_class, epochs=args.epochs,
                        aim_epochs=args.aim_epochs, seeds=tuple(int(s) for s in args.seeds.split(",")),
                        timing=False)
    variants = LINK_TREND if args.no_pred else LINK_TREND + PRED_TREND
    rows = run_ablation(bench, variants, args.out)
    for name, acc in summarize(rows).items():
        print(f"{name:12s} mean test top-1 {acc:.3f}")
    print(f"table: {args.out / 'ablation.csv'}")


if __name__ == "__main__":
    main()
