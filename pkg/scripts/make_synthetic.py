"""Write a synthetic skeleton benchmark as train/val/test JSONL files.

    python3 scripts/make_synthetic.py correlated-limbs data/ --samples-per-class 200
"""
import argparse
from pathlib import Path

from asgcn.data import (SynthConfig, constant_velocity_classes, correlated_limbs_classes,
                        generate_synthetic, save_dataset, split_dataset, walk_wave_classes)

BENCHMARKS = {
    "correlated-limbs": correlated_limbs_classes,
    "walk-wave": walk_wave_classes,
    "constant-velocity": constant_velocity_classes,
}


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("benchmark", choices=sorted(BENCHMARKS))
    ap.add_argument("out", type=Path)
    ap.add_argument("--samples-per-class", type=int, default=200)
    ap.add_argument("--frames", type=int, default=42)
    ap.add_argument("--noise-std", type=float, default=0.02)
    ap.add_argument("--split", default="0.6,0.2,0.2", help="train,val,test fractions")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cfg = SynthConfig(classes=BENCHMARKS[args.benchmark](), samples_per_class=args.samples_per_class,
                      frames=args.frames, noise_std=args.noise_std, seed=args.seed)
    fractions = tuple(float(f) for f in args.split.split(","))
    parts = split_dataset(generate_synthetic(cfg), fractions, seed=args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    for name, part in zip(("train", "val", "test"), parts):
        save_dataset(part, args.out / f"{name}.jsonl")
        print(f"{name}: {len(part)} sequences -> {args.out / f'{name}.jsonl'}")


if __name__ == "__main__":
    main()
