"""Desk-scale CIFAR-10 run: CIFAR-adapted Finet-Small, 5000/1000 subset, 20 epochs, G=1 and G=4.

Needs the CIFAR-10 binary batches in --data-dir (or $FINEGRAIN_DATA_DIR).
Writes one metrics CSV and one checkpoint per group count.
"""
import argparse
import logging
from pathlib import Path

from finegrain.cli import build_from_config
from finegrain.checkpoint import save_checkpoint
from finegrain.config import preset
from finegrain.data import load_cifar10, normalize_channels
from finegrain.train import train_epochs


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--data-dir", default=None)
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--groups", default="1,4")
    ap.add_argument("--epochs", type=int, default=20)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    train = load_cifar10(args.data_dir, "train").subset(5000)
    test = load_cifar10(args.data_dir, "test").subset(1000)
    train, test, _ = normalize_channels(train, test)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for g in (int(v) for v in args.groups.split(",")):
        cfg = preset("desk").updated({"groups": g, "epochs": args.epochs, "input_form": "cifar"})
        net = build_from_config(cfg, 10, "cifar")
        csv = out / f"metrics_g{g}.csv"
        csv.unlink(missing_ok=True)
        hist = train_epochs(net, train, test, cfg, csv_path=csv)
        save_checkpoint(out / f"finet_g{g}.ckpt", net, cfg)
        first, last = hist[0], hist[-1]
        print(f"G={g} train_loss {first['train_loss']:.3f} -> {last['train_loss']:.3f} "
              f"(ratio {last['train_loss'] / first['train_loss']:.2f}), val_top1 {last['val_top1']:.3f}")


if __name__ == "__main__":
    main()
