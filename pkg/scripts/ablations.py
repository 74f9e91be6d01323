"""Train the ablation arms on one dataset and print accuracy and identity leakage.

    python scripts/ablations.py --data runs/data --arms MIC MIC-MI
"""
import argparse
import dataclasses

from micfer.experiments import ABLATIONS, prepare, run_arm
from micfer.train import TrainConfig


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data", default="runs/data", help="dataset dir (generated if missing)")
    ap.add_argument("--arms", nargs="+", default=list(ABLATIONS), choices=list(ABLATIONS))
    ap.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--style-spread", type=float, default=0.0,
                    help="used only when the dataset has to be generated")
    args = ap.parse_args()
    ws = prepare(args.data, seed=args.seed, style_spread=args.style_spread)
    print("arm,accuracy,identity_probe,chance,mi,best_epoch,train_seconds")
    for arm in args.arms:
        cfg = dataclasses.replace(TrainConfig(epochs=args.epochs, seed=args.seed), **ABLATIONS[arm])
        r = run_arm(ws, cfg, arm, args.seed)
        print(f"{arm},{r.accuracy:.4f},{r.identity_probe:.4f},{r.probe_chance:.4f},{r.mi:.4f},"
              f"{r.best_epoch},{r.train_seconds:.0f}", flush=True)


if __name__ == "__main__":
    main()
