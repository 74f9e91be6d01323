"""Sweep the MI weight alpha or the starting reconstruction weight beta.

    python scripts/sweep.py alpha 0 0.01 0.1 0.5
    python scripts/sweep.py beta 0 0.5 1 2
"""
import argparse
import dataclasses

from micfer.experiments import prepare, run_arm
from micfer.train import TrainConfig

FIELDS = {"alpha": "alpha", "beta": "beta_start"}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("param", choices=list(FIELDS))
    ap.add_argument("values", type=float, nargs="+")
    ap.add_argument("--data", default="runs/data")
    ap.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--style-spread", type=float, default=0.0,
                    help="used only when the dataset has to be generated")
    args = ap.parse_args()
    ws = prepare(args.data, seed=args.seed, style_spread=args.style_spread)
    print(f"{args.param},accuracy,identity_probe,mi")
    for v in args.values:
        cfg = dataclasses.replace(TrainConfig(epochs=args.epochs, seed=args.seed),
                                  **{FIELDS[args.param]: v})
        r = run_arm(ws, cfg, f"{args.param}={v}", args.seed)
        print(f"{v},{r.accuracy:.4f},{r.identity_probe:.4f},{r.mi:.4f}", flush=True)


if __name__ == "__main__":
    main()
