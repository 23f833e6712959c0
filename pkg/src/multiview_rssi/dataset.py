"""On-disk synthetic datasets: frame blobs, a raw 40 Hz RSSI CSV and a JSON manifest."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io, rssi
from .rssi import FrameIndex, PairedDataset
from .scene import SceneData, SceneSpec, simulate

MANIFEST_VERSION = 1
DATA_ROOT_ENV = "MULTIVIEW_RSSI_DATA"


class ManifestError(ValueError):
    """A manifest is malformed or references missing files."""


@dataclass
class PipelineConfig:
    mad_window: int = 40
    mad_threshold: float = 5.0
    smooth: float = 4
    tolerance_us: int = 25_000
    band: tuple[float, float] = (0.90, 0.95)


def pair_scene(data: SceneData, cfg: PipelineConfig | None = None):
    """Condition the raw trace and pair it with frames (refs are frame indices)."""
    cfg = cfg or PipelineConfig()
    pre = rssi.preprocess(data.raw, cfg.mad_window, cfg.mad_threshold, cfg.smooth, cfg.band)
    m = data.visible.shape[1]
    idx = list(range(len(data.frame_timestamps)))
    frames = FrameIndex([data.frame_timestamps] * m, [idx] * m, data.spec.measurement.frame_rate)
    paired = rssi.align_frames_rssi(frames, pre.trace, cfg.tolerance_us)
    return paired, pre


def resolve_root(path) -> Path:
    """Relative dataset paths resolve against ``$MULTIVIEW_RSSI_DATA`` when it is set."""
    p = Path(path)
    base = os.environ.get(DATA_ROOT_ENV)
    if base and not p.is_absolute() and not p.exists():
        return Path(base) / p
    return p


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1)


def generate_dataset(spec: SceneSpec, frames: int, out, seed: int | None = None,
                     pipeline: PipelineConfig | None = None, fractions=(0.8, 0.1, 0.1)) -> PairedDataset:
    """Simulate a scene and write blobs, ``rssi.csv`` and ``manifest.json`` under ``out``."""
    from .training import split_dataset  # local: training imports this module

    seed = spec.seed if seed is None else seed
    pipeline = pipeline or PipelineConfig()
    out = Path(out)
    data = simulate(spec, frames, seed=seed)
    paired, pre = pair_scene(data, pipeline)
    if len(paired) >= 10:
        paired = split_dataset(paired, fractions, "chronological_blocks", seed)
    m = len(spec.cameras)
    try:
        for k in range(m):
            (out / "frames" / f"cam{k}").mkdir(parents=True, exist_ok=True)
        paths = [[f"frames/cam{k}/{i:06d}.mvtf" for i in range(frames)] for k in range(m)]
        for i in range(frames):
            for k in range(m):
                io.write_frame(out / paths[k][i], data.images[i, k])
        rssi.write_rssi_csv(out / "rssi.csv", data.raw)
        samples = [
            {"frames": [paths[k][ref[k]] for k in range(m)], "timestamp_us": int(t),
             "label_dbm": float(y), "split": str(s)}
            for ref, t, y, s in zip(paired.frames, paired.timestamps, paired.labels, paired.split)
        ]
        manifest = {
            "format": "multiview-rssi-manifest",
            "version": MANIFEST_VERSION,
            "scene": spec.to_dict(),
            "config": {"frames": frames, "seed": seed, "pipeline": vars(pipeline),
                       "fractions": list(fractions)},
            "cameras": m,
            "rssi_csv": "rssi.csv",
            "frame_timestamps_us": [int(t) for t in data.frame_timestamps],
            "preprocess": {"trend_r": pre.trend.r, "band": list(pre.trend.band),
                           "status": pre.trend.status, "dropped": paired.dropped,
                           "outliers": int(pre.outliers.sum())},
            "samples": samples,
        }
        (out / "manifest.json").write_text(_dump(manifest))
    except OSError as exc:
        raise OSError(f"writing dataset to {out}: {exc}") from exc
    return paired


def load_manifest(root) -> dict:
    root = resolve_root(root)
    path = root / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError:
        raise ManifestError(f"{path}: manifest not found") from None
    if manifest.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"{path}: unsupported manifest version {manifest.get('version')}")
    for s in manifest["samples"]:
        for f in s["frames"]:
            if not (root / f).exists():
                raise ManifestError(f"{path}: referenced frame {f} is missing")
    return manifest


def load_dataset(root) -> tuple[PairedDataset, np.ndarray]:
    """Manifest samples plus the stacked images ``(n, M, C, H, W)``."""
    root = resolve_root(root)
    manifest = load_manifest(root)
    samples = manifest["samples"]
    cache: dict[str, np.ndarray] = {}

    def get(f):
        if f not in cache:
            cache[f] = io.load_image(root / f)
        return cache[f]

    images = np.stack([np.stack([get(f) for f in s["frames"]]) for s in samples]).astype(np.float32)
    ds = PairedDataset([tuple(s["frames"]) for s in samples], [s["label_dbm"] for s in samples],
                       [s["timestamp_us"] for s in samples], [s["split"] for s in samples])
    return ds, images
