"""Per-camera ViT encoder: patchify, embed with CLS and positions, pre-LN blocks."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor


@dataclass(frozen=True)
class EncoderConfig:
    image_height: int = 240
    image_width: int = 320
    patch_size: int = 16
    channels: int = 3
    embed_dim: int = 96
    depth: int = 6
    heads: int = 3
    ffn_ratio: int = 4
    dropout: float = 0.1

    def __post_init__(self):
        sizes = (self.image_height, self.image_width, self.patch_size, self.channels, self.embed_dim,
                 self.heads, self.ffn_ratio)
        if min(sizes) <= 0 or self.depth < 0:
            raise DimensionError(f"encoder sizes must be positive (depth nonnegative): {self}")
        if not 0 <= self.dropout < 1:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        p = self.patch_size
        if self.image_height % p or self.image_width % p:
            raise DimensionError(
                f"image {self.image_height}x{self.image_width} not divisible by patch size {p}"
            )
        if self.embed_dim % self.heads:
            raise DimensionError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")

    @property
    def num_patches(self) -> int:
        return (self.image_height // self.patch_size) * (self.image_width // self.patch_size)

    @property
    def tokens(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def to_dict(self) -> dict:
        return asdict(self)


def trunc_normal(rng: np.random.Generator, shape, std=0.02, dtype=T.DEFAULT_DTYPE) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


def weight(rng, shape, init="vit", dtype=T.DEFAULT_DTYPE) -> np.ndarray:
    """Weight-matrix init: ``"vit"`` is N(0, 0.02) truncated, ``"xavier"`` scales with fan-in/out."""
    if init == "vit":
        return trunc_normal(rng, shape, 0.02, dtype)
    if init == "xavier":
        return trunc_normal(rng, shape, float(np.sqrt(2.0 / (shape[0] + shape[1]))), dtype)
    raise ValueError(f"unknown init {init!r}")


def init_block(prefix: str, dim: int, ffn_ratio: int, rng, dtype=T.DEFAULT_DTYPE,
               init="vit") -> dict[str, Tensor]:
    hidden = ffn_ratio * dim
    p = {
        "ln1.g": np.ones(dim, dtype),
        "ln1.b": np.zeros(dim, dtype),
        "qkv.w": weight(rng, (dim, 3 * dim), init, dtype),
        "qkv.b": np.zeros(3 * dim, dtype),
        "proj.w": weight(rng, (dim, dim), init, dtype),
        "proj.b": np.zeros(dim, dtype),
        "ln2.g": np.ones(dim, dtype),
        "ln2.b": np.zeros(dim, dtype),
        "fc1.w": weight(rng, (dim, hidden), init, dtype),
        "fc1.b": np.zeros(hidden, dtype),
        "fc2.w": weight(rng, (hidden, dim), init, dtype),
        "fc2.b": np.zeros(dim, dtype),
    }
    return {f"{prefix}.{k}": Tensor(v, requires_grad=True) for k, v in p.items()}


def init_encoder(prefix: str, cfg: EncoderConfig, rng, dtype=T.DEFAULT_DTYPE, init="vit") -> dict[str, Tensor]:
    d = cfg.embed_dim
    params = {
        f"{prefix}.patch.w": Tensor(weight(rng, (cfg.patch_dim, d), init, dtype), requires_grad=True),
        f"{prefix}.patch.b": Tensor(np.zeros(d, dtype), requires_grad=True),
        f"{prefix}.pos": Tensor(trunc_normal(rng, (cfg.tokens, d), dtype=dtype), requires_grad=True),
        f"{prefix}.cls": Tensor(trunc_normal(rng, (d,), dtype=dtype), requires_grad=True),
    }
    for i in range(cfg.depth):
        params.update(init_block(f"{prefix}.blocks.{i}", d, cfg.ffn_ratio, rng, dtype, init))
    return params


def patchify(image, patch_size: int) -> Tensor:
    """Split ``[..., C, H, W]`` images into ``[..., N, P*P*C]`` patch rows.

    Patches are ordered row-major (top-left first); each row is the P x P x C
    block flattened with the channel index fastest, then column, then row.
    """
    image = T.as_tensor(image)
    *lead, c, h, w = image.shape
    p = patch_size
    if h % p or w % p:
        raise DimensionError(f"image {h}x{w} not divisible by patch size {p}")
    nh, nw = h // p, w // p
    x = T.reshape(image, (*lead, c, nh, p, nw, p))
    k = len(lead)
    # -> (..., nh, nw, py, px, c)
    x = T.permute(x, (*range(k), k + 1, k + 3, k + 2, k + 4, k))
    return T.reshape(x, (*lead, nh * nw, p * p * c))


def embed(patches: Tensor, params, prefix: str, *, dropout=0.0, training=False, rng=None) -> Tensor:
    """Project patches, prepend the CLS token and add positional embeddings."""
    w, b = params[f"{prefix}.patch.w"], params[f"{prefix}.patch.b"]
    pos, cls = params[f"{prefix}.pos"], params[f"{prefix}.cls"]
    if patches.shape[-1] != w.shape[0]:
        raise DimensionError(f"patch width {patches.shape[-1]} != projection input {w.shape[0]}")
    if patches.shape[-2] + 1 != pos.shape[0]:
        raise DimensionError(f"{patches.shape[-2]} patches but {pos.shape[0]} positions")
    tok = T.linear(patches, w, b)
    lead = patches.shape[:-2]
    cls_row = T.reshape(cls, (1, cls.shape[0]))
    if lead:
        cls_row = T.broadcast_to(cls_row, (*lead, 1, cls.shape[0]))
    z = T.add(T.concat_tokens([cls_row, tok]), pos)
    return T.dropout(z, dropout, training, rng)


def attention(x: Tensor, params, prefix: str, heads: int, return_weights=False):
    """Multi-head scaled dot-product self-attention on ``[..., t, D]``."""
    *lead, t, d = x.shape
    dh = d // heads
    qkv = T.linear(x, params[f"{prefix}.qkv.w"], params[f"{prefix}.qkv.b"])
    qkv = T.reshape(qkv, (*lead, t, 3, heads, dh))
    k = len(lead)
    qkv = T.permute(qkv, (k + 1, *range(k), k + 2, k, k + 3))  # (3, ..., h, t, dh)
    q, kk, v = (T.take_rows(qkv, i, axis=0) for i in range(3))
    scores = T.mul(T.matmul(q, T.transpose(kk)), 1.0 / np.sqrt(dh))
    weights = T.softmax_rows(scores)
    ctx = T.matmul(weights, v)  # (..., h, t, dh)
    ctx = T.permute(ctx, (*range(k), k + 1, k, k + 2))
    ctx = T.reshape(ctx, (*lead, t, d))
    out = T.linear(ctx, params[f"{prefix}.proj.w"], params[f"{prefix}.proj.b"])
    return (out, weights) if return_weights else out


def transformer_block(z: Tensor, params, prefix: str, heads: int, *, dropout=0.0, training=False,
                      rng=None, record=None) -> Tensor:
    """Pre-LN block: z' = MHA(LN(z)) + z, out = FFN(LN(z')) + z'."""
    h = T.layer_norm(z, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    a, w = attention(h, params, prefix, heads, return_weights=True)
    if record is not None:
        record.append(w.data)
    z1 = T.add(z, T.dropout(a, dropout, training, rng))
    h = T.layer_norm(z1, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    h = T.gelu(T.linear(h, params[f"{prefix}.fc1.w"], params[f"{prefix}.fc1.b"]))
    h = T.linear(h, params[f"{prefix}.fc2.w"], params[f"{prefix}.fc2.b"])
    return T.add(z1, T.dropout(h, dropout, training, rng))


def encode(image, cfg: EncoderConfig, params, prefix: str = "enc0", *, training=False, rng=None,
           record=None) -> Tensor:
    """Image ``[..., C, H, W]`` to the token matrix ``[..., N+1, D]`` after ``depth`` blocks."""
    patches = patchify(image, cfg.patch_size)
    z = embed(patches, params, prefix, dropout=cfg.dropout, training=training, rng=rng)
    for i in range(cfg.depth):
        z = transformer_block(z, params, f"{prefix}.blocks.{i}", cfg.heads, dropout=cfg.dropout,
                              training=training, rng=rng, record=record)
    return z
