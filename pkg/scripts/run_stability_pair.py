"""Train softmax and sigmoid encoders on identical data and compare their logs.

Writes both logs plus configs to --out and prints a per-checkpoint summary
of loss and global gradient norm.

    python3 scripts/run_stability_pair.py --steps 300 --lr 3e-3 --no-clip
"""

import argparse
import dataclasses
from pathlib import Path

import numpy as np

from sigattn.lab import EncoderConfig, TrainConfig, train, write_run


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--clip", type=float, default=1.0)
    p.add_argument("--no-clip", action="store_true")
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--d-model", type=int, default=32)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--every", type=int, default=50, help="summary interval")
    p.add_argument("--out", default="stability_pair")
    args = p.parse_args()

    ecfg = EncoderConfig(layers=args.layers, d_model=args.d_model)
    tcfg = TrainConfig(lr=args.lr, steps=args.steps, seed=args.seed, clip_norm=None if args.no_clip else args.clip)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    logs = {}
    for mech in ("softmax", "sigmoid"):
        cfg = dataclasses.replace(ecfg, mechanism=mech)
        logs[mech], _ = train(cfg, tcfg)
        write_run(logs[mech], cfg, tcfg, out / f"stability_{mech}.csv")

    same = list(logs["softmax"].column("batch_hash")) == list(logs["sigmoid"].column("batch_hash"))
    print(f"identical data order: {same}")
    print(f"{'step':>6} {'softmax loss':>13} {'sigmoid loss':>13} {'softmax |g|':>12} {'sigmoid |g|':>12}")
    for s in range(0, args.steps, args.every):
        row = [logs[m].column(c)[s] for c in ("loss", "global_grad_norm") for m in ("softmax", "sigmoid")]
        print(f"{s:>6} {row[0]:>13.4f} {row[1]:>13.4f} {row[2]:>12.4g} {row[3]:>12.4g}")
    for m in ("softmax", "sigmoid"):
        g = logs[m].column("global_grad_norm")
        print(f"{m}: peak grad norm {np.nanmax(g):.4g}, non-finite steps {int(np.sum(~np.isfinite(g)))}")


if __name__ == "__main__":
    main()
