"""Generate a dataset, train a small MulViT-TF, evaluate it.

Everything goes through the same functions the command-line tool uses;
the equivalent shell session is::

    multiview-rssi --seed 0 gen --frames 1000 --out demo_out/e2e/data
    multiview-rssi train --data demo_out/e2e/data --model mulvit-tf --config cfg.json --out demo_out/e2e/run
    multiview-rssi eval --ckpt demo_out/e2e/run/model.ckpt --data demo_out/e2e/data \\
        --report demo_out/e2e/report.json --cdf demo_out/e2e/cdf.csv
"""
import argparse
import json
from pathlib import Path

from multiview_rssi import cli

ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
ap.add_argument("--out", type=Path, default=Path("demo_out/e2e"))
ap.add_argument("--frames", type=int, default=1000)
ap.add_argument("--epochs", type=int, default=20)
args = ap.parse_args()
args.out.mkdir(parents=True, exist_ok=True)

cfg = {"train": {"phase1_epochs": 2, "phase2_epochs": args.epochs, "base_lr": 1e-3, "batch_size": 16,
                 "dropout": 0.0, "split_mode": "shuffled"},
       "model": {"embed_dim": 32, "depth": 3, "heads": 4, "fusion_depth": 1, "init": "xavier"}}
(args.out / "cfg.json").write_text(json.dumps(cfg, indent=1))
data, run = args.out / "data", args.out / "run"

steps = [
    ["--seed", "0", "gen", "--frames", str(args.frames), "--out", str(data)],
    ["train", "--data", str(data), "--model", "mulvit-tf", "--config", str(args.out / "cfg.json"), "--out", str(run)],
    ["eval", "--ckpt", str(run / "model.ckpt"), "--data", str(data), "--report", str(args.out / "report.json"),
     "--cdf", str(args.out / "cdf.csv")],
]
for argv in steps:
    print("$ multiview-rssi", " ".join(argv))
    if cli.main(argv) != 0:
        raise SystemExit(1)
