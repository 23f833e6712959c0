"""RSSI trace conditioning and frame/RSSI pairing.

Stages, applied in this order by :func:`preprocess`:

1. ``interpolate_missing``  - fill invalid samples linearly in time
2. ``remove_outliers_mad``  - flag samples far from a local median, re-interpolate
3. ``gaussian_smooth``      - short normalized Gaussian FIR
4. ``downsample_pair_average`` - average adjacent samples (40 Hz -> 20 Hz)
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import metrics

log = logging.getLogger(__name__)

MAD_FLOOR_DB = 0.25


class DataError(ValueError):
    """Input data cannot be processed (no valid samples, malformed file, ...)."""


@dataclass(frozen=True)
class RssiTrace:
    timestamps: np.ndarray  # int64 microseconds, strictly increasing
    values: np.ndarray  # dBm
    valid: np.ndarray  # bool
    nominal_rate: float
    stages: tuple[str, ...] = ()

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=np.int64)
        vals = np.asarray(self.values, dtype=np.float64)
        ok = np.asarray(self.valid, dtype=bool)
        if not (ts.shape == vals.shape == ok.shape) or ts.ndim != 1:
            raise DataError("timestamps, values and valid must be equal-length 1-D arrays")
        if ts.size > 1 and np.any(np.diff(ts) <= 0):
            raise DataError("timestamps must be strictly increasing")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "valid", ok)

    def __len__(self):
        return self.timestamps.size

    @classmethod
    def from_values(cls, values, rate: float, start_us: int = 0, valid=None) -> "RssiTrace":
        values = np.asarray(values, dtype=np.float64)
        ts = start_us + np.round(np.arange(values.size) * 1e6 / rate).astype(np.int64)
        if valid is None:
            valid = np.isfinite(values)
        return cls(ts, np.where(valid, values, np.nan), valid, rate)

    def _with(self, stage, **kw) -> "RssiTrace":
        return replace(self, stages=self.stages + (stage,), **kw)


def interpolate_missing(trace: RssiTrace) -> RssiTrace:
    """Linear interpolation in time between the nearest valid neighbours.

    Samples before the first (after the last) valid one take its value.
    """
    ok = trace.valid
    if not ok.any():
        raise DataError("trace has no valid samples")
    if ok.all():
        return trace._with("interpolate")
    ts = trace.timestamps.astype(np.float64)
    vals = trace.values.copy()
    vals[~ok] = np.interp(ts[~ok], ts[ok], trace.values[ok])
    return trace._with("interpolate", values=vals, valid=np.ones_like(ok))


def _centered_windows(x: np.ndarray, window: int) -> np.ndarray:
    """Rows of the centered window around each sample, NaN-padded at the edges."""
    left = window // 2
    right = window - left - 1
    padded = np.concatenate([np.full(left, np.nan), x, np.full(right, np.nan)])
    return np.lib.stride_tricks.sliding_window_view(padded, window)


def mad_flags(values: np.ndarray, window: int = 40, threshold: float = 5.0,
              floor: float = MAD_FLOOR_DB) -> np.ndarray:
    """Boolean mask of samples deviating from the local median by more than threshold*MAD."""
    if window < 3:
        raise ValueError("MAD window must be at least 3 samples")
    if threshold <= 0:
        raise ValueError("MAD threshold must be positive")
    win = _centered_windows(np.asarray(values, dtype=np.float64), window)
    med = np.nanmedian(win, axis=1)
    mad = np.nanmedian(np.abs(win - med[:, None]), axis=1)
    return np.abs(values - med) > threshold * np.maximum(mad, floor)


def remove_outliers_mad(trace: RssiTrace, window: int = 40, threshold: float = 5.0,
                        floor: float = MAD_FLOOR_DB) -> RssiTrace:
    """Invalidate MAD outliers and fill them again by interpolation."""
    if not trace.valid.all():
        trace = interpolate_missing(trace)
    flags = mad_flags(trace.values, window, threshold, floor)
    flagged = replace(trace, valid=~flags)
    out = interpolate_missing(flagged)
    return replace(out, stages=trace.stages + ("mad",))


def gaussian_kernel(support: float) -> np.ndarray:
    """Normalized Gaussian taps with sigma = support/4 and radius ceil(support/2)."""
    if support < 1:
        raise ValueError("smoothing support must be >= 1 sample")
    sigma = support / 4.0
    radius = int(math.ceil(support / 2.0))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_smooth(trace: RssiTrace, support: float = 4) -> RssiTrace:
    """FIR smoothing; at the edges the kernel is renormalized over available samples."""
    if not trace.valid.all():
        raise DataError("interpolate missing samples before smoothing")
    k = gaussian_kernel(support)
    num = np.convolve(trace.values, k, mode="same")
    den = np.convolve(np.ones_like(trace.values), k, mode="same")
    return trace._with("smooth", values=num / den)


def downsample_pair_average(trace: RssiTrace) -> RssiTrace:
    """Average samples (2k, 2k+1); timestamps are the pair means. An odd tail sample is dropped."""
    n = len(trace)
    if n % 2:
        log.warning("downsample: dropping 1 trailing sample")
    m = n // 2
    if m == 0:
        raise DataError("need at least two samples to downsample")
    ts = trace.timestamps[: 2 * m].reshape(m, 2)
    vals = trace.values[: 2 * m].reshape(m, 2).mean(axis=1)
    valid = trace.valid[: 2 * m].reshape(m, 2).all(axis=1)
    ts_mid = ts[:, 0] + (ts[:, 1] - ts[:, 0]) // 2
    return RssiTrace(ts_mid, vals, valid, trace.nominal_rate / 2, trace.stages + ("downsample",))


@dataclass
class TrendCheck:
    r: float
    band: tuple[float, float]

    @property
    def status(self) -> str:
        lo, hi = self.band
        return "ok" if lo <= self.r <= hi else "warn"


def trend_check(raw_downsampled: RssiTrace | np.ndarray, preprocessed: RssiTrace | np.ndarray,
                band=(0.90, 0.95)) -> TrendCheck:
    """Pearson r between the merely downsampled and the fully conditioned series."""
    a = raw_downsampled.values if isinstance(raw_downsampled, RssiTrace) else raw_downsampled
    b = preprocessed.values if isinstance(preprocessed, RssiTrace) else preprocessed
    if len(a) != len(b):
        raise ValueError("trend_check needs equal-length series")
    return TrendCheck(metrics.pearson_r(a, b), tuple(band))


@dataclass
class PreprocessResult:
    trace: RssiTrace
    baseline: RssiTrace  # interpolated raw trace, downsampled, for the trend check
    outliers: np.ndarray  # MAD flags at the input rate
    trend: TrendCheck


def preprocess(trace: RssiTrace, mad_window: int = 40, mad_threshold: float = 5.0,
               smooth: float = 4, band=(0.90, 0.95)) -> PreprocessResult:
    filled = interpolate_missing(trace)
    outliers = mad_flags(filled.values, mad_window, mad_threshold)
    cleaned = remove_outliers_mad(filled, mad_window, mad_threshold)
    smoothed = gaussian_smooth(cleaned, smooth)
    out = downsample_pair_average(smoothed)
    baseline = downsample_pair_average(filled)
    return PreprocessResult(out, baseline, outliers, trend_check(baseline, out, band))


# ---------------------------------------------------------------- pairing


@dataclass
class FrameIndex:
    timestamps: list[np.ndarray]  # per camera, microseconds
    refs: list[list]  # per camera, blob references (paths or in-memory indices)
    nominal_rate: float = 20.0

    def __post_init__(self):
        self.timestamps = [np.asarray(t, dtype=np.int64) for t in self.timestamps]
        if len(self.timestamps) != len(self.refs):
            raise DataError("timestamps and refs must list the same cameras")
        for t, r in zip(self.timestamps, self.refs):
            if len(t) != len(r):
                raise DataError("each camera needs one ref per timestamp")
            if t.size > 1 and np.any(np.diff(t) <= 0):
                raise DataError("frame timestamps must be strictly increasing")

    @property
    def cameras(self) -> int:
        return len(self.timestamps)


@dataclass
class PairedDataset:
    frames: list[tuple]  # per sample, one ref per camera
    labels: np.ndarray  # dBm
    timestamps: np.ndarray  # microseconds (anchor camera clock)
    split: np.ndarray = field(default=None)  # "train" / "val" / "test"
    dropped: int = 0

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.float64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        if self.split is None:
            self.split = np.full(len(self.labels), "train", dtype="<U5")
        else:
            self.split = np.asarray(self.split, dtype="<U5")

    def __len__(self):
        return len(self.labels)

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.split == split)


def _nearest(sorted_ts: np.ndarray, query: np.ndarray) -> np.ndarray:
    pos = np.searchsorted(sorted_ts, query)
    lo = np.clip(pos - 1, 0, sorted_ts.size - 1)
    hi = np.clip(pos, 0, sorted_ts.size - 1)
    return np.where(np.abs(sorted_ts[lo] - query) <= np.abs(sorted_ts[hi] - query), lo, hi)


def align_frames_rssi(frames: FrameIndex, trace: RssiTrace, tolerance_us: int = 25_000) -> PairedDataset:
    """Pair camera-0 frames with the nearest frame of every other camera and the nearest RSSI sample.

    A sample is kept only if every leg lies within ``tolerance_us`` of the
    camera-0 timestamp and the RSSI sample is valid.
    """
    anchor = frames.timestamps[0]
    if anchor.size == 0 or len(trace) == 0:
        raise DataError("no frames or no RSSI samples to pair")
    keep = np.ones(anchor.size, dtype=bool)
    picks = [np.arange(anchor.size)]
    for ts in frames.timestamps[1:]:
        if ts.size == 0:
            raise DataError("a camera has no frames")
        j = _nearest(ts, anchor)
        keep &= np.abs(ts[j] - anchor) <= tolerance_us
        picks.append(j)
    r = _nearest(trace.timestamps, anchor)
    keep &= np.abs(trace.timestamps[r] - anchor) <= tolerance_us
    keep &= trace.valid[r]
    idx = np.flatnonzero(keep)
    if idx.size == 0:
        raise DataError("no frame/RSSI pairs within tolerance")
    refs = [tuple(frames.refs[m][picks[m][i]] for m in range(frames.cameras)) for i in idx]
    return PairedDataset(refs, trace.values[r[idx]], anchor[idx], dropped=int(anchor.size - idx.size))


# ---------------------------------------------------------------- CSV


def read_rssi_csv(path, rate: float = 40.0) -> RssiTrace:
    """Read ``timestamp_us,rssi_dbm`` rows; an empty value marks an invalid sample."""
    ts, vals, ok = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["timestamp_us", "rssi_dbm"]:
            raise DataError(f"{path}: line 1: expected header 'timestamp_us,rssi_dbm'")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise DataError(f"{path}: line {lineno}: expected 2 fields, got {len(row)}")
            try:
                t = int(row[0])
                v = float(row[1]) if row[1].strip() else math.nan
            except ValueError as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from None
            ts.append(t)
            vals.append(v)
            ok.append(bool(row[1].strip()) and math.isfinite(v))
    if not ts:
        raise DataError(f"{path}: no samples")
    try:
        return RssiTrace(np.array(ts), np.array(vals), np.array(ok), rate)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


def write_rssi_csv(path, trace: RssiTrace, decimals: int | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp_us", "rssi_dbm"])
        for t, v, ok in zip(trace.timestamps, trace.values, trace.valid):
            if not ok:
                w.writerow([int(t), ""])
            elif decimals is None:
                w.writerow([int(t), repr(float(v))])
            else:
                w.writerow([int(t), f"{v:.{decimals}f}"])
