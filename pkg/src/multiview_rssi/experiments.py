"""Desk-scale training recipes: a memorization probe and the multi-view benefit run.

``overfit_probe`` memorizes a handful of random samples. ``run_seed`` and
``verdict`` run the multi-view benefit comparison on the default synthetic
room at reduced resolution (64x48, D=32, L=3, L'=1), where one seed of all
three models trains in a few minutes on one CPU core.
"""
from __future__ import annotations

import argparse
import json
import time

import numpy as np

from . import dataset as D
from . import models as M
from . import scene as S
from . import training as TR

DESK = dict(image_height=48, image_width=64, embed_dim=32, depth=3, heads=4, fusion_depth=1)
CONFIG = dict(phase1_epochs=2, phase2_epochs=40, base_lr=1e-3, batch_size=16, dropout=0.0,
              weight_decay=0.1, split_mode="shuffled")
FRAMES = 2000


def overfit_probe(steps: int = 2000, seed: int = 0, backbone_lr_scale: float = 0.1):
    """Tiny MulViT-TF on 32 random samples, one full batch per optimizer step.

    Returns the train RMSE in dB and the number of optimizer steps taken.
    """
    spec = M.preset("mulvit_tf", image_height=48, image_width=64, embed_dim=16, depth=2, heads=2,
                    fusion_depth=1, head_hidden=32)
    rng = np.random.default_rng(seed)
    images = rng.random((32, 2, 3, 48, 64)).astype(np.float32)
    labels = rng.normal(-60, 5, 32)
    data = TR.TrainData(images, labels, np.full(32, "train"))
    cfg = TR.TrainConfig(phase1_epochs=0, phase2_epochs=steps, base_lr=2e-3, backbone_lr_scale=backbone_lr_scale,
                         weight_decay=0.0, dropout=0.0, batch_size=32, seed=seed)
    res = TR.train(spec, M.init_params(spec, seed=seed, init="xavier"), data, cfg)
    _, rep = TR.evaluate(spec, res.final_params, images, labels, res.normalizer)
    return rep.rmse, len(res.lr_log)


def prepare(seed: int) -> TR.TrainData:
    data = S.simulate(S.SceneSpec(), FRAMES, seed=seed)
    paired, _ = D.pair_scene(data)
    paired = TR.split_dataset(paired, mode=CONFIG["split_mode"], seed=seed)
    images = data.images[[r[0] for r in paired.frames]]
    return TR.TrainData.from_paired(paired, images)


def fit(name: str, data: TR.TrainData, seed: int, camera: int = 0) -> dict:
    spec = M.preset(name, camera=camera, **DESK)
    cfg = TR.TrainConfig(seed=seed, **CONFIG)
    t0 = time.time()
    res = TR.train(spec, M.init_params(spec, seed=seed, init="xavier"), data, cfg)
    te = data.idx("test")
    _, rep = TR.evaluate(spec, res.params, data.images[te], data.labels[te], res.normalizer)
    return {"rmse": rep.rmse, "coverage": rep.coverage, "seconds": time.time() - t0}


def run_seed(seed: int) -> dict:
    data = prepare(seed)
    return {"mulvit_tf": fit("mulvit_tf", data, seed),
            "sinvit_cam0": fit("sinvit_d", data, seed, camera=0),
            "sinvit_cam1": fit("sinvit_d", data, seed, camera=1)}


def verdict(runs: list[dict]) -> dict:
    """Seed-averaged RMSE and coverage; TF must beat the better single view by 10% and on coverage."""
    avg = {k: {m: sum(r[k][m] for r in runs) / len(runs) for m in ("rmse", "coverage")} for k in runs[0]}
    best = min(("sinvit_cam0", "sinvit_cam1"), key=lambda k: avg[k]["rmse"])
    tf = avg["mulvit_tf"]
    return {"avg": avg, "best_single": best, "rmse_reduction": 1 - tf["rmse"] / avg[best]["rmse"],
            "passed": tf["rmse"] <= 0.9 * avg[best]["rmse"] and tf["coverage"] > avg[best]["coverage"]}


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description="multi-view benefit run on the default room")
    ap.add_argument("seeds", type=int, nargs="+")
    a = ap.parse_args(argv)
    runs = []
    for s in a.seeds:
        runs.append(run_seed(s))
        print(s, json.dumps(runs[-1]), flush=True)
    print(json.dumps(verdict(runs), indent=1))


if __name__ == "__main__":
    main()
