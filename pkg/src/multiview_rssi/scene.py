"""Synthetic indoor scene: a 2D room with box obstacles, a wandering station,
top-down camera views with line-of-sight occlusion, and log-distance RSSI.

Coordinates are metres with the origin at a room corner. Image row ``r`` and
column ``c`` map to the pixel centre ``((c + .5) * width / W, (r + .5) * height / H)``.
"""
from __future__ import annotations

import dataclasses
import functools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .rssi import RssiTrace

STA_RGB = (1.0, 0.0, 0.0)
AP_RGB = (0.0, 0.8, 0.0)
FLOOR_RGB = (0.8, 0.8, 0.8)
HIDDEN_RGB = (0.1, 0.1, 0.1)
OBSTACLE_RGB = (0.45, 0.3, 0.15)


class SceneError(ValueError):
    """Invalid or infeasible scene description."""


@dataclass(frozen=True)
class Camera:
    x: float
    y: float
    heading_deg: float
    fov_deg: float = 90.0


@dataclass(frozen=True)
class Propagation:
    p0_dbm: float = -30.0
    d0_m: float = 1.0
    exponent: float = 2.2
    wall_loss_db: float = 6.0
    shadowing_db: float = 2.0


@dataclass(frozen=True)
class Measurement:
    """How the simulated link reports RSSI (rates, dropouts, spikes)."""

    frame_rate: float = 20.0
    rssi_rate: float = 40.0
    jitter_us: int = 2000
    missing_rate: float = 0.01
    spike_rate: float = 0.01
    spike_db: float = 20.0


@dataclass(frozen=True)
class SceneSpec:
    width: float = 8.0
    height: float = 6.0
    obstacles: tuple[tuple[float, float, float, float], ...] = (
        (2.6, 1.6, 4.0, 3.0),
        (4.0, 3.0, 5.4, 4.4),
    )
    ap: tuple[float, float] = (6.5, 4.8)
    cameras: tuple[Camera, ...] = (
        Camera(0.1, 5.9, -45.0, 90.0),
        Camera(7.9, 0.1, 135.0, 90.0),
    )
    propagation: Propagation = Propagation()
    measurement: Measurement = Measurement()
    speed: float = 1.5
    turn_std: float = 0.6
    margin: float = 0.15
    image_height: int = 48
    image_width: int = 64
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "obstacles", tuple(tuple(float(v) for v in o) for o in self.obstacles))
        object.__setattr__(self, "cameras", tuple(c if isinstance(c, Camera) else Camera(**c)
                                                  for c in self.cameras))
        object.__setattr__(self, "ap", tuple(float(v) for v in self.ap))
        if isinstance(self.propagation, dict):
            object.__setattr__(self, "propagation", Propagation(**self.propagation))
        if isinstance(self.measurement, dict):
            object.__setattr__(self, "measurement", Measurement(**self.measurement))
        if self.width <= 0 or self.height <= 0:
            raise SceneError("room dimensions must be positive")
        for o in self.obstacles:
            if not (o[0] < o[2] and o[1] < o[3]):
                raise SceneError(f"obstacle {o} must be (x0, y0, x1, y1) with x0<x1, y0<y1")
        points = [("AP", self.ap)] + [(f"camera {i}", (c.x, c.y)) for i, c in enumerate(self.cameras)]
        for name, (x, y) in points:
            if not (0 <= x <= self.width and 0 <= y <= self.height):
                raise SceneError(f"{name} at ({x}, {y}) lies outside the room")
            if inside_any(np.array([[x, y]]), self.obstacles)[0]:
                raise SceneError(f"{name} at ({x}, {y}) lies inside an obstacle")
        for i, c in enumerate(self.cameras):
            if not 0 < c.fov_deg <= 180:
                raise SceneError(f"camera {i}: FoV must be in (0, 180] degrees")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(**d)

    @classmethod
    def load(cls, path) -> "SceneSpec":
        """Read a JSON scene file; keys mirror the dataclass fields and all are optional."""
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def replace(self, **kw) -> "SceneSpec":
        return dataclasses.replace(self, **kw)


# ---------------------------------------------------------------- geometry


def inside_any(points: np.ndarray, rects, pad: float = 0.0) -> np.ndarray:
    pts = np.atleast_2d(points)
    hit = np.zeros(len(pts), dtype=bool)
    for x0, y0, x1, y1 in rects:
        hit |= ((pts[:, 0] >= x0 - pad) & (pts[:, 0] <= x1 + pad)
                & (pts[:, 1] >= y0 - pad) & (pts[:, 1] <= y1 + pad))
    return hit


def segment_hits_rect(p, q, rect) -> np.ndarray:
    """Slab test: does segment p->q touch the closed rectangle? Vectorized over q."""
    p = np.asarray(p, dtype=np.float64)
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    d = q - p
    t0 = np.zeros(len(q))
    t1 = np.ones(len(q))
    ok = np.ones(len(q), dtype=bool)
    for axis, (lo, hi) in enumerate(((rect[0], rect[2]), (rect[1], rect[3]))):
        da = d[:, axis]
        par = np.abs(da) < 1e-12
        ok &= ~(par & ((p[axis] < lo) | (p[axis] > hi)))
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = (lo - p[axis]) / da
            tb = (hi - p[axis]) / da
        near = np.where(par, -np.inf, np.minimum(ta, tb))
        far = np.where(par, np.inf, np.maximum(ta, tb))
        t0 = np.maximum(t0, near)
        t1 = np.minimum(t1, far)
    return ok & (t0 <= t1)


def line_of_sight(p, q, rects) -> np.ndarray:
    q = np.atleast_2d(q)
    blocked = np.zeros(len(q), dtype=bool)
    for r in rects:
        blocked |= segment_hits_rect(p, q, r)
    return ~blocked


def _segments_cross(p, q, a, b) -> np.ndarray:
    """Proper or touching intersection of segments p->q (vectorized over q) and a->b."""
    def orient(o, u, v):
        return (u[..., 0] - o[..., 0]) * (v[..., 1] - o[..., 1]) - (u[..., 1] - o[..., 1]) * (v[..., 0] - o[..., 0])

    p = np.broadcast_to(np.asarray(p, float), q.shape)
    a = np.broadcast_to(np.asarray(a, float), q.shape)
    b = np.broadcast_to(np.asarray(b, float), q.shape)
    d1, d2 = orient(a, b, p), orient(a, b, q)
    d3, d4 = orient(p, q, a), orient(p, q, b)
    return (d1 * d2 < 0) & (d3 * d4 < 0)


def wall_crossings(p, q, rects) -> np.ndarray:
    """Number of obstacle edges crossed by segment p->q (vectorized over q)."""
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    count = np.zeros(len(q), dtype=np.int64)
    for x0, y0, x1, y1 in rects:
        corners = [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]
        for i in range(4):
            count += _segments_cross(p, q, corners[i], corners[(i + 1) % 4])
    return count


def in_fov(cam: Camera, q) -> np.ndarray:
    q = np.atleast_2d(q)
    ang = np.degrees(np.arctan2(q[:, 1] - cam.y, q[:, 0] - cam.x))
    diff = (ang - cam.heading_deg + 180.0) % 360.0 - 180.0
    return np.abs(diff) <= cam.fov_deg / 2.0 + 1e-9


def visible(spec: SceneSpec, k: int, q) -> np.ndarray:
    """Camera ``k`` sees point(s) ``q``: within its FoV and no obstacle on the sight line."""
    cam = spec.cameras[k]
    return in_fov(cam, q) & line_of_sight((cam.x, cam.y), q, spec.obstacles)


def pixel_centres(spec: SceneSpec, h=None, w=None) -> np.ndarray:
    h = h or spec.image_height
    w = w or spec.image_width
    ys = (np.arange(h) + 0.5) * spec.height / h
    xs = (np.arange(w) + 0.5) * spec.width / w
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)


# ---------------------------------------------------------------- trajectory


def _free(spec: SceneSpec, pts) -> np.ndarray:
    pts = np.atleast_2d(pts)
    m = spec.margin
    in_room = ((pts[:, 0] >= m) & (pts[:, 0] <= spec.width - m)
               & (pts[:, 1] >= m) & (pts[:, 1] <= spec.height - m))
    return in_room & ~inside_any(pts, spec.obstacles, pad=m)


def simulate_trajectory(spec: SceneSpec, steps: int, dt: float, seed: int | None = None) -> np.ndarray:
    """Correlated random walk at constant speed, reflecting off walls and obstacles.

    Returns ``(steps, 2)`` positions; deterministic for a given seed.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    start = None
    for _ in range(10_000):
        cand = rng.uniform([0, 0], [spec.width, spec.height])
        if _free(spec, cand)[0]:
            start = cand
            break
    if start is None:
        raise SceneError("scene has no free space for the station")
    pos = np.empty((steps, 2))
    pos[0] = start
    heading = rng.uniform(-math.pi, math.pi)
    step = spec.speed * dt
    for i in range(1, steps):
        heading += rng.normal(0.0, spec.turn_std * math.sqrt(dt))
        v = np.array([math.cos(heading), math.sin(heading)]) * step
        cur = pos[i - 1]
        nxt = cur + v
        if not _free(spec, nxt)[0]:
            # reflect whichever velocity component takes us out of free space
            for flip in ((-1, 1), (1, -1), (-1, -1)):
                cand = cur + v * flip
                if _free(spec, cand)[0]:
                    v = v * flip
                    nxt = cand
                    break
            else:
                nxt = cur
                v = -v
            heading = math.atan2(v[1], v[0])
        pos[i] = nxt
    return pos


# ---------------------------------------------------------------- rendering


@dataclass
class RenderedFrame:
    image: np.ndarray  # (C, H, W) float32 in [0, 1]
    timestamp_us: int = 0
    sta_visible: bool = False


@functools.lru_cache(maxsize=32)
def _background(spec: SceneSpec, k: int, h: int, w: int) -> np.ndarray:
    centres = pixel_centres(spec, h, w).reshape(-1, 2)
    vis = visible(spec, k, centres)
    obst = inside_any(centres, spec.obstacles)
    img = np.empty((h * w, 3), dtype=np.float32)
    img[:] = HIDDEN_RGB
    img[vis] = FLOOR_RGB
    img[obst] = OBSTACLE_RGB
    ap = np.hypot(centres[:, 0] - spec.ap[0], centres[:, 1] - spec.ap[1]) <= 0.2
    img[ap] = AP_RGB
    img = img.reshape(h, w, 3).transpose(2, 0, 1).copy()
    img.setflags(write=False)
    return img


def _marker_mask(spec: SceneSpec, pos, h: int, w: int, radius: float = 0.3) -> np.ndarray:
    c = pixel_centres(spec, h, w)
    return np.hypot(c[..., 0] - pos[0], c[..., 1] - pos[1]) <= radius


def render_view(spec: SceneSpec, k: int, sta_pos, timestamp_us: int = 0,
                size: tuple[int, int] | None = None) -> RenderedFrame:
    """Top-down view of camera ``k``: floor it can see, obstacles, AP, and the STA if in sight."""
    if not 0 <= k < len(spec.cameras):
        raise IndexError(f"camera index {k} out of range")
    h, w = size or (spec.image_height, spec.image_width)
    img = np.array(_background(spec, k, h, w))
    seen = bool(visible(spec, k, np.asarray(sta_pos, dtype=np.float64))[0])
    if seen:
        mask = _marker_mask(spec, sta_pos, h, w)
        for ch, v in enumerate(STA_RGB):
            img[ch][mask] = v
    return RenderedFrame(img, int(timestamp_us), seen)


def sta_marker_pixels(image: np.ndarray) -> np.ndarray:
    """Mask of pixels painted in the STA marker colour."""
    return np.all(image == np.asarray(STA_RGB, dtype=image.dtype)[:, None, None], axis=0)


# ---------------------------------------------------------------- RSSI


def path_loss_rssi(spec: SceneSpec, sta_pos) -> np.ndarray:
    """Deterministic part of the RSSI: log-distance loss plus per-edge wall loss."""
    pr = spec.propagation
    q = np.atleast_2d(np.asarray(sta_pos, dtype=np.float64))
    d = np.hypot(q[:, 0] - spec.ap[0], q[:, 1] - spec.ap[1])
    walls = wall_crossings(spec.ap, q, spec.obstacles)
    return pr.p0_dbm - 10.0 * pr.exponent * np.log10(np.maximum(d, pr.d0_m) / pr.d0_m) - walls * pr.wall_loss_db


def rssi_ground_truth(spec: SceneSpec, sta_pos, rng: np.random.Generator | None = None):
    """Path-loss RSSI plus Normal(0, shadowing^2); a scalar for a single position."""
    base = path_loss_rssi(spec, sta_pos)
    sigma = spec.propagation.shadowing_db
    if sigma > 0:
        if rng is None:
            raise ValueError("an rng is required when shadowing is nonzero")
        base = base + rng.normal(0.0, sigma, size=base.shape)
    return float(base[0]) if np.ndim(sta_pos) == 1 else base


# ---------------------------------------------------------------- dataset


@dataclass
class SceneData:
    """Everything a scene run produces, in memory."""

    spec: SceneSpec
    frame_timestamps: np.ndarray  # (n,) microseconds
    images: np.ndarray  # (n, M, C, H, W) float32
    visible: np.ndarray  # (n, M) bool
    positions: np.ndarray  # (n, 2) STA position at each frame
    raw: RssiTrace  # measured trace at the RSSI rate
    clean: np.ndarray  # noiseless path loss at each RSSI sample
    spikes: np.ndarray  # bool, injected spike positions in ``raw``
    extra: dict = field(default_factory=dict)


def simulate(spec: SceneSpec, frames: int, seed: int | None = None, render: bool = True) -> SceneData:
    """Simulate ``frames`` camera steps and the RSSI samples measured meanwhile."""
    seed = spec.seed if seed is None else seed
    ms = spec.measurement
    ratio = int(round(ms.rssi_rate / ms.frame_rate))
    if ratio < 1 or abs(ratio * ms.frame_rate - ms.rssi_rate) > 1e-9:
        raise SceneError("RSSI rate must be an integer multiple of the frame rate")
    n_rssi = frames * ratio
    dt_us = int(round(1e6 / ms.rssi_rate))
    pos40 = simulate_trajectory(spec, n_rssi, dt_us / 1e6, seed=seed)
    # RSSI sample j at j*dt; frame k sits at the centre of its RSSI group
    rssi_ts = np.arange(n_rssi, dtype=np.int64) * dt_us
    frame_ts = rssi_ts[::ratio] + (ratio - 1) * dt_us // 2
    rng = np.random.default_rng([seed, 1])
    jitter = rng.integers(-ms.jitter_us, ms.jitter_us + 1, size=n_rssi)
    rssi_ts = rssi_ts + jitter
    clean = path_loss_rssi(spec, pos40)
    meas = clean + rng.normal(0.0, spec.propagation.shadowing_db, size=n_rssi)
    spikes = rng.random(n_rssi) < ms.spike_rate
    meas[spikes] += rng.choice([-1.0, 1.0], size=int(spikes.sum())) * ms.spike_db
    valid = rng.random(n_rssi) >= ms.missing_rate
    raw = RssiTrace(rssi_ts, np.where(valid, meas, np.nan), valid, ms.rssi_rate)
    # frame position: mean of its RSSI group (frame time is the group centre)
    fpos = pos40.reshape(frames, ratio, 2).mean(axis=1)
    m = len(spec.cameras)
    vis = np.stack([visible(spec, k, fpos) for k in range(m)], axis=1)
    images = None
    if render:
        images = np.empty((frames, m, 3, spec.image_height, spec.image_width), dtype=np.float32)
        for i in range(frames):
            for k in range(m):
                images[i, k] = render_view(spec, k, fpos[i]).image
    return SceneData(spec, frame_ts, images, vis, fpos, raw, clean, spikes & valid)
