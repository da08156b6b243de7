"""Command line front end: disatrain DATASET... -o weights.disaw1"""

from __future__ import annotations

import argparse
import sys

from .errors import DataError
from .train import TrainConfig, train


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(
        prog="disatrain",
        description="Train the descriptor network on DISAP1 patch pairs "
                    "and export DISAW1 weights.")
    ap.add_argument("datasets", nargs="+", metavar="DISAP1")
    ap.add_argument("-o", "--weights-out", required=True, metavar="DISAW1")
    ap.add_argument("--log-out", metavar="JSON",
                    help="per-epoch train/val MSE log")
    ap.add_argument("--epochs", type=int, default=35)
    ap.add_argument("--batch-size", type=int, default=256)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--val-split", type=float, default=0.1)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--no-augment", action="store_true",
                    help="disable rotation and intensity augmentation")
    ap.add_argument("--small-angle", type=float, default=0.0, metavar="RAD",
                    help="std dev of optional resampled rotation wobble")
    args = ap.parse_args(argv)
    try:
        cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                          lr=args.lr, val_split=args.val_split,
                          rotate=not args.no_augment,
                          intensity=not args.no_augment,
                          small_angle=args.small_angle, seed=args.seed)
    except ValueError as e:
        ap.error(str(e))
    try:
        res = train(args.datasets, cfg, weights_out=args.weights_out,
                    log_out=args.log_out, progress=True)
    except (DataError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    print(f"best epoch {res.best_epoch}: val mse {res.best_val_mse:.6f} "
          f"-> {args.weights_out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
