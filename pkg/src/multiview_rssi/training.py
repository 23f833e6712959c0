"""Two-phase fine-tuning: frozen backbone first, then end-to-end with a reduced backbone lr.

Both phases use AdamW with decoupled weight decay and a per-step cosine
schedule that restarts at the start of each phase. The loss is the MSE on
z-scored labels; metrics are always reported in dBm.
"""
from __future__ import annotations

import dataclasses
import hashlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import io, metrics
from . import tensor as T
from .models import ModelSpec, backbone_names, forward
from .rssi import PairedDataset

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


class ConfigError(ValueError):
    """Invalid training configuration."""


class TrainingDiverged(RuntimeError):
    """Loss or gradients became non-finite; carries the last good parameters."""

    def __init__(self, msg, last_good=None):
        super().__init__(msg)
        self.last_good = last_good


@dataclass
class TrainConfig:
    phase1_epochs: int = 80
    phase2_epochs: int = 120
    base_lr: float = 1e-4
    backbone_lr_scale: float = 0.1
    weight_decay: float = 0.1
    dropout: float = 0.1
    batch_size: int = 32
    eta_min: float = 1e-6
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    split_mode: str = "chronological_blocks"
    eval_batch_size: int = 256

    def problems(self) -> list[str]:
        """Every validation failure, so a caller can report them all at once."""
        out = []
        if len(self.fractions) != 3 or abs(sum(self.fractions) - 1.0) > 1e-9:
            out.append(f"fractions must be three values summing to 1, got {self.fractions}")
        if any(f < 0 for f in self.fractions):
            out.append("fractions must be nonnegative")
        for name in ("base_lr", "batch_size", "eval_batch_size"):
            if getattr(self, name) <= 0:
                out.append(f"{name} must be positive")
        if not 0 < self.backbone_lr_scale:
            out.append("backbone_lr_scale must be positive")
        if self.weight_decay < 0:
            out.append("weight_decay must be nonnegative")
        if not 0 <= self.eta_min <= self.base_lr:
            out.append("eta_min must lie in [0, base_lr]")
        if not 0 <= self.dropout < 1:
            out.append("dropout must lie in [0, 1)")
        if self.phase1_epochs < 0 or self.phase2_epochs < 0:
            out.append("epoch counts must be nonnegative")
        if self.split_mode not in ("chronological_blocks", "shuffled"):
            out.append(f"unknown split_mode {self.split_mode!r}")
        return out

    def validate(self) -> "TrainConfig":
        errs = self.problems()
        if errs:
            raise ConfigError("; ".join(errs))
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        d = dict(d)
        for k in ("betas", "fractions"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


# ---------------------------------------------------------------- data prep


@dataclass
class Normalizer:
    mean: float
    std: float
    fitted_on: str = "train"

    @classmethod
    def fit(cls, labels_dbm) -> "Normalizer":
        y = np.asarray(labels_dbm, dtype=np.float64)
        std = float(y.std())
        if not std > 0:
            raise ConfigError("training labels have zero variance")
        return cls(float(y.mean()), std)

    def norm(self, y):
        return (np.asarray(y, dtype=np.float64) - self.mean) / self.std

    def denorm(self, z):
        return np.asarray(z, dtype=np.float64) * self.std + self.mean


def split_dataset(ds: PairedDataset, fractions=(0.8, 0.1, 0.1), mode="chronological_blocks",
                  seed: int = 0) -> PairedDataset:
    """Tag samples train/val/test; val and test get floor(f*n), train the remainder."""
    n = len(ds)
    if n < 10:
        raise ConfigError(f"need at least 10 samples to split, got {n}")
    n_val, n_test = int(math.floor(fractions[1] * n)), int(math.floor(fractions[2] * n))
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) <= 0:
        raise ConfigError(f"split {fractions} of {n} samples leaves an empty split")
    if mode == "chronological_blocks":
        order = np.argsort(ds.timestamps, kind="stable")
    elif mode == "shuffled":
        order = np.random.default_rng(seed).permutation(n)
    else:
        raise ConfigError(f"unknown split mode {mode!r}")
    tags = np.empty(n, dtype="<U5")
    tags[order[:n_train]] = "train"
    tags[order[n_train:n_train + n_val]] = "val"
    tags[order[n_train + n_val:]] = "test"
    return dataclasses.replace(ds, split=tags)


def normalize_images(x: np.ndarray) -> np.ndarray:
    """Fixed per-channel mean/std of 0.5 for frames in [0, 1]."""
    return (np.asarray(x, dtype=np.float32) - np.float32(0.5)) / np.float32(0.5)


# ---------------------------------------------------------------- loss / schedule / optimizer


def mse_loss(pred: T.Tensor, target) -> T.Tensor:
    target = T.as_tensor(np.asarray(target, dtype=pred.dtype))
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss: prediction shape {pred.shape} vs target {target.shape}")
    if pred.data.size == 0:
        raise ValueError("mse_loss on an empty batch")
    diff = T.sub(pred, target)
    return T.mean_all(T.mul(diff, diff))


def cosine_lr(step: int, total_steps: int, base: float, eta_min: float = 0.0) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return base
    return eta_min + 0.5 * (base - eta_min) * (1.0 + math.cos(math.pi * step / total_steps))


def decays(name: str) -> bool:
    """Weight decay applies to weight matrices only (not biases, LN, CLS, positions, segments)."""
    return name.endswith(".w")


@dataclass
class OptimizerState:
    groups: dict[str, str]  # param name -> group name
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def create(cls, params, groups: dict[str, str]) -> "OptimizerState":
        st = cls(dict(groups))
        for k in groups:
            st.m[k] = np.zeros_like(params[k].data)
            st.v[k] = np.zeros_like(params[k].data)
        return st


def adamw_step(params, grads, state: OptimizerState, lr_by_group: dict[str, float],
               betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0) -> None:
    """One AdamW update, in place, over the parameters tracked by ``state``."""
    b1, b2 = betas
    for name in state.groups:
        g = grads.get(name)
        if g is not None and not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient in {name}")
    state.step += 1
    t = state.step
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    for name, group in state.groups.items():
        g = grads.get(name)
        p = params[name].data if isinstance(params[name], T.Tensor) else params[name]
        lr = lr_by_group[group]
        if g is None:
            g = np.zeros_like(p)
        if weight_decay and decays(name):
            p -= lr * weight_decay * p
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------- training


@dataclass
class TrainData:
    images: np.ndarray  # (n, M, C, H, W), values in [0, 1]
    labels: np.ndarray  # dBm
    split: np.ndarray  # "train"/"val"/"test"

    def idx(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.split == split)

    @classmethod
    def from_paired(cls, ds: PairedDataset, images) -> "TrainData":
        return cls(np.asarray(images), np.asarray(ds.labels, dtype=np.float64), np.asarray(ds.split))


@dataclass
class TrainResult:
    params: dict  # best-validation parameters
    final_params: dict
    normalizer: Normalizer
    history: list[dict]
    lr_log: list[dict]
    best_epoch: int
    best_val_rmse: float


def with_dropout(spec: ModelSpec, p: float) -> ModelSpec:
    encs = tuple(dataclasses.replace(e, dropout=p) for e in spec.encoders)
    return dataclasses.replace(spec, encoders=encs)


def params_hash(params, names=None) -> str:
    h = hashlib.sha256()
    for k in sorted(names if names is not None else params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k].data).tobytes())
    return h.hexdigest()


def snapshot(params) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in params.items()}


def predict(spec: ModelSpec, params, images, batch_size: int = 256) -> np.ndarray:
    """Evaluation-mode predictions in normalized units."""
    out = []
    with T.no_grad():
        for s in range(0, len(images), batch_size):
            x = normalize_images(images[s:s + batch_size])
            out.append(forward(x, spec, params, training=False).data.astype(np.float64))
    return np.concatenate(out) if out else np.zeros(0)


def _phase_groups(spec, params, phase: int) -> dict[str, str]:
    frozen = set(backbone_names(spec, params))
    if phase == 1:
        return {k: "head" for k in params if k not in frozen}
    return {k: ("backbone" if k in frozen else "head") for k in params}


def _save_state(path, spec, cfg, normalizer, params, state, best, extra):
    tensors = {f"param/{k}": p.data for k, p in params.items()}
    tensors.update({f"adam.m/{k}": a for k, a in state.m.items()})
    tensors.update({f"adam.v/{k}": a for k, a in state.v.items()})
    tensors.update({f"best/{k}": a for k, a in best.items()})
    header = {"kind": "train-state", "spec": spec.to_dict(), "config": cfg.to_dict(),
              "normalizer": dataclasses.asdict(normalizer),
              "optimizer": {"step": state.step, "groups": state.groups}, **extra}
    io.save_checkpoint(path, tensors, header)


def train(spec: ModelSpec, params, data: TrainData, config: TrainConfig, *, state_path=None,
          resume_from=None, stop_after_epochs: int | None = None, verbose=False) -> TrainResult:
    """Run both fine-tuning phases and return the best-validation parameters.

    ``state_path`` receives a resumable snapshot after every epoch;
    ``resume_from`` continues from such a snapshot. ``stop_after_epochs`` ends
    the run early (counted over both phases), which is how resumption is tested.
    """
    config.validate()
    spec = with_dropout(spec, config.dropout)
    tr, va = data.idx("train"), data.idx("val")
    if tr.size == 0:
        raise ConfigError("training split is empty")
    normalizer = Normalizer.fit(data.labels[tr])
    y_norm = normalizer.norm(data.labels).astype(np.float32)
    steps_per_epoch = math.ceil(tr.size / config.batch_size)
    history: list[dict] = []
    lr_log: list[dict] = []
    best = snapshot(params)
    best_val, best_epoch = math.inf, -1
    start_phase, start_epoch, state = 1, 0, None
    if resume_from is not None:
        tensors, header = io.load_checkpoint(resume_from)
        for k, p in params.items():
            p.data[...] = tensors[f"param/{k}"]
        best = {k[5:]: v for k, v in tensors.items() if k.startswith("best/")}
        start_phase, start_epoch = header["phase"], header["next_epoch"]
        best_val, best_epoch = header["best_val_rmse"], header["best_epoch"]
        history, lr_log = header["history"], header["lr_log"]
        opt = header["optimizer"]
        state = OptimizerState(opt["groups"], step=opt["step"])
        state.m = {k: tensors[f"adam.m/{k}"] for k in opt["groups"]}
        state.v = {k: tensors[f"adam.v/{k}"] for k in opt["groups"]}
        normalizer = Normalizer(**header["normalizer"])

    epochs_run = 0
    for phase, n_epochs in ((1, config.phase1_epochs), (2, config.phase2_epochs)):
        if phase < start_phase:
            continue
        first = start_epoch if phase == start_phase else 0
        if first >= n_epochs:
            continue
        groups = _phase_groups(spec, params, phase)
        if state is None or phase != start_phase or first == 0:
            state = OptimizerState.create(params, groups)
        scale = {"head": 1.0, "backbone": config.backbone_lr_scale}
        total = n_epochs * steps_per_epoch
        for epoch in range(first, n_epochs):
            if stop_after_epochs is not None and epochs_run >= stop_after_epochs:
                return _result(params, best, normalizer, history, lr_log, best_epoch, best_val)
            rng = np.random.default_rng([config.seed, phase, epoch])
            order = rng.permutation(tr)
            losses = []
            epoch_lr = None
            for b in range(steps_per_epoch):
                idx = order[b * config.batch_size:(b + 1) * config.batch_size]
                step = epoch * steps_per_epoch + b
                lr = cosine_lr(step, total, config.base_lr, config.eta_min)
                lrs = {g: lr * s for g, s in scale.items()}
                epoch_lr = lr if epoch_lr is None else epoch_lr
                lr_log.append({"phase": phase, "step": step, **{g: lrs[g] for g in set(groups.values())}})
                try:
                    pred = forward(normalize_images(data.images[idx]), spec, params, training=True, rng=rng)
                    loss = mse_loss(pred, y_norm[idx])
                    T.backward(loss)
                except T.NonFiniteError as exc:
                    raise TrainingDiverged(f"phase {phase} epoch {epoch}: {exc}", best) from exc
                grads = {k: params[k].grad for k in groups}
                adamw_step(params, grads, state, lrs, config.betas, config.eps, config.weight_decay)
                for p in params.values():
                    p.grad = None
                losses.append(float(loss.data))
            row = {"epoch": len(history), "phase": phase, "phase_epoch": epoch, "lr": epoch_lr,
                   "train_loss": float(np.mean(losses))}
            if va.size:
                pv = predict(spec, params, data.images[va], config.eval_batch_size)
                row["val_loss"] = float(np.mean((pv - y_norm[va]) ** 2))
                row["val_rmse_db"] = metrics.rmse(normalizer.denorm(pv), data.labels[va])
                if row["val_rmse_db"] < best_val:
                    best_val, best_epoch = row["val_rmse_db"], row["epoch"]
                    best = snapshot(params)
            else:
                row["val_loss"] = row["val_rmse_db"] = float("nan")
                best, best_epoch = snapshot(params), row["epoch"]
            history.append(row)
            epochs_run += 1
            if verbose:
                log.info("phase %d epoch %d lr %.2e train %.4f val %.4f (%.3f dB)", phase, epoch,
                         epoch_lr, row["train_loss"], row["val_loss"], row["val_rmse_db"])
            if state_path is not None:
                nxt_phase, nxt_epoch = (phase, epoch + 1)
                _save_state(state_path, spec, config, normalizer, params, state, best,
                            {"phase": nxt_phase, "next_epoch": nxt_epoch, "best_val_rmse": best_val,
                             "best_epoch": best_epoch, "history": history, "lr_log": lr_log})
        state = None
    return _result(params, best, normalizer, history, lr_log, best_epoch, best_val)


def _result(params, best, normalizer, history, lr_log, best_epoch, best_val) -> TrainResult:
    best_params = {k: T.Tensor(best[k].copy(), requires_grad=True) for k in params}
    return TrainResult(best_params, params, normalizer, history, lr_log, best_epoch, best_val)


# ---------------------------------------------------------------- evaluation / checkpoints


def evaluate(spec: ModelSpec, params, images, labels_dbm, normalizer: Normalizer,
             threshold: float = 3.0, batch_size: int = 256):
    """Predictions in dBm and the metrics report against ``labels_dbm``."""
    if len(images) == 0:
        raise ValueError("cannot evaluate an empty split")
    pred = normalizer.denorm(predict(spec, params, images, batch_size))
    return pred, metrics.report(pred, labels_dbm, threshold)


def save_model(path, spec: ModelSpec, params, normalizer: Normalizer, config: TrainConfig | None = None,
               extra: dict | None = None) -> None:
    header = {"kind": "model", "spec": spec.to_dict(), "normalizer": dataclasses.asdict(normalizer),
              "config": config.to_dict() if config else None, "ln_eps": T.LN_EPS, **(extra or {})}
    io.save_checkpoint(path, {k: p.data if isinstance(p, T.Tensor) else p for k, p in params.items()}, header)


def load_model(path):
    """Returns ``(spec, params, normalizer, header)``."""
    tensors, header = io.load_checkpoint(path)
    if "spec" not in header:
        raise io.FormatError(f"{path}: checkpoint lacks a model spec")
    spec = ModelSpec.from_dict(header["spec"])
    prefix = "param/" if header.get("kind") == "train-state" else ""
    params = {k[len(prefix):]: T.Tensor(v, requires_grad=True) for k, v in tensors.items()
              if k.startswith(prefix) and (prefix or "/" not in k)}
    return spec, params, Normalizer(**header["normalizer"]), header
