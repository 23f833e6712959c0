"""Model variants: Transformer fusion, token-wise DNN fusion, and single-camera."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoder import EncoderConfig, encode, init_block, init_encoder, transformer_block, trunc_normal, weight
from .tensor import Tensor

VARIANTS = ("sinvit_d", "sinvit_w", "mulvit_tf", "mulvit_twdnn")


class SpecError(ValueError):
    """Raised for an inconsistent model description."""


@dataclass(frozen=True)
class ModelSpec:
    variant: str
    encoders: tuple[EncoderConfig, ...]
    fusion_depth: int = 2
    fusion_ffn_ratio: int = 2
    twdnn_blocks: int = 4
    twdnn_hidden: int = 192
    head_hidden: int = 128
    camera: int = 0  # which camera a single-view model consumes
    meta: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise SpecError(f"unknown variant {self.variant!r}")
        if not self.encoders:
            raise SpecError("at least one encoder config is required")
        if self.multi_view:
            if len(self.encoders) < 2:
                raise SpecError(f"{self.variant} needs at least two encoders")
            dims = {(e.num_patches, e.embed_dim) for e in self.encoders}
            if len(dims) != 1:
                raise SpecError(f"encoders disagree on (N, D): {sorted(dims)}")
            heads = {e.heads for e in self.encoders}
            if len(heads) != 1:
                raise SpecError("fusion blocks need a common head count")
        elif len(self.encoders) != 1:
            raise SpecError(f"{self.variant} takes exactly one encoder")

    @property
    def multi_view(self) -> bool:
        return self.variant.startswith("mulvit")

    @property
    def cameras(self) -> int:
        return len(self.encoders)

    @property
    def embed_dim(self) -> int:
        return self.encoders[0].embed_dim

    @property
    def head_in(self) -> int:
        return self.embed_dim * (self.cameras if self.multi_view else 1)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["encoders"] = [e.to_dict() for e in self.encoders]
        d.pop("meta")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["encoders"] = tuple(EncoderConfig(**e) for e in d["encoders"])
        return cls(**d)


def preset(name: str, cameras: int = 2, camera: int = 0, **encoder_overrides) -> ModelSpec:
    """Named architectures; encoder fields (image size, D, L, heads, ...) may be overridden."""
    name = name.replace("-", "_")
    if name == "sinvit_d":
        enc = dict(embed_dim=96, depth=12, heads=3)
    elif name == "sinvit_w":
        enc = dict(embed_dim=192, depth=6, heads=3)
    elif name in ("mulvit_tf", "mulvit_twdnn"):
        enc = dict(embed_dim=96, depth=6, heads=3)
    else:
        raise SpecError(f"unknown preset {name!r}; choose from {', '.join(VARIANTS)}")
    fusion = {k: encoder_overrides.pop(k) for k in
              ("fusion_depth", "fusion_ffn_ratio", "twdnn_blocks", "twdnn_hidden", "head_hidden")
              if k in encoder_overrides}
    enc.update(encoder_overrides)
    n = cameras if name.startswith("mulvit") else 1
    return ModelSpec(variant=name, encoders=tuple(EncoderConfig(**enc) for _ in range(n)),
                     camera=camera, **fusion)


def backbone_names(spec: ModelSpec, params) -> list[str]:
    """Parameters frozen in the first fine-tuning phase: patch projections and encoder blocks."""
    return [k for k in params if k.startswith("enc") and (".patch." in k or ".blocks." in k)]


def init_params(spec: ModelSpec, seed: int = 0, dtype=T.DEFAULT_DTYPE, init: str = "vit") -> dict[str, Tensor]:
    """Random parameters. Embeddings and CLS always use N(0, 0.02); ``init`` picks the weight-matrix scheme."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for m, cfg in enumerate(spec.encoders):
        params.update(init_encoder(f"enc{m}", cfg, rng, dtype, init))
    d = spec.embed_dim
    if spec.variant == "mulvit_tf":
        for i in range(spec.fusion_depth):
            params.update(init_block(f"fusion.blocks.{i}", d, spec.fusion_ffn_ratio, rng, dtype, init))
    elif spec.variant == "mulvit_twdnn":
        for m in range(spec.cameras):
            params[f"twdnn.seg.{m}"] = Tensor(trunc_normal(rng, (d,), dtype=dtype), requires_grad=True)
        hid = spec.twdnn_hidden
        for i in range(spec.twdnn_blocks):
            pre = f"twdnn.blocks.{i}"
            arrs = {
                "ln.g": np.ones(d, dtype), "ln.b": np.zeros(d, dtype),
                "fc1.w": weight(rng, (d, hid), init, dtype), "fc1.b": np.zeros(hid, dtype),
                "fc2.w": weight(rng, (hid, hid), init, dtype), "fc2.b": np.zeros(hid, dtype),
                "fc3.w": weight(rng, (hid, d), init, dtype), "fc3.b": np.zeros(d, dtype),
            }
            params.update({f"{pre}.{k}": Tensor(v, requires_grad=True) for k, v in arrs.items()})
    k, h = spec.head_in, spec.head_hidden
    params["head.fc1.w"] = Tensor(weight(rng, (k, h), init, dtype), requires_grad=True)
    params["head.fc1.b"] = Tensor(np.zeros(h, dtype), requires_grad=True)
    params["head.fc2.w"] = Tensor(weight(rng, (h, 1), init, dtype), requires_grad=True)
    params["head.fc2.b"] = Tensor(np.zeros(1, dtype), requires_grad=True)
    return params


def mlp_head(f: Tensor, params) -> Tensor:
    """affine -> GELU -> affine to a scalar per sample (no output activation)."""
    w1 = params["head.fc1.w"]
    if f.shape[-1] != w1.shape[0]:
        raise T.DimensionError(f"head expects width {w1.shape[0]}, got {f.shape[-1]}")
    h = T.gelu(T.linear(f, w1, params["head.fc1.b"]))
    y = T.linear(h, params["head.fc2.w"], params["head.fc2.b"])
    return T.reshape(y, y.shape[:-1])


def _views(images, spec: ModelSpec):
    """Accept a list of per-camera arrays or one array with the camera axis before C,H,W."""
    if isinstance(images, (list, tuple)):
        views = list(images)
    else:
        arr = images.data if isinstance(images, Tensor) else np.asarray(images)
        views = [np.take(arr, m, axis=arr.ndim - 4) for m in range(arr.shape[-4])]
    return views


def encode_views(images, spec: ModelSpec, params, *, training=False, rng=None) -> list[Tensor]:
    views = _views(images, spec)
    if spec.multi_view:
        if len(views) != spec.cameras:
            raise SpecError(f"{spec.variant} expects {spec.cameras} views, got {len(views)}")
        return [encode(v, cfg, params, f"enc{m}", training=training, rng=rng)
                for m, (v, cfg) in enumerate(zip(views, spec.encoders))]
    view = views[spec.camera] if len(views) > 1 else views[0]
    return [encode(view, spec.encoders[0], params, "enc0", training=training, rng=rng)]


def fuse_tf(tokens: list[Tensor], spec: ModelSpec, params, *, training=False, rng=None) -> Tensor:
    """Concatenate per-camera token matrices and run the fusion blocks."""
    z = T.concat_tokens(tokens)
    cfg = spec.encoders[0]
    for i in range(spec.fusion_depth):
        z = transformer_block(z, params, f"fusion.blocks.{i}", cfg.heads, dropout=cfg.dropout,
                              training=training, rng=rng)
    return z


def fuse_twdnn(tokens: list[Tensor], spec: ModelSpec, params) -> Tensor:
    """Add segment embeddings, concatenate, then token-wise residual FFN blocks."""
    z = T.concat_tokens([T.add(t, params[f"twdnn.seg.{m}"]) for m, t in enumerate(tokens)])
    for i in range(spec.twdnn_blocks):
        pre = f"twdnn.blocks.{i}"
        h = T.layer_norm(z, params[f"{pre}.ln.g"], params[f"{pre}.ln.b"])
        h = T.gelu(T.linear(h, params[f"{pre}.fc1.w"], params[f"{pre}.fc1.b"]))
        h = T.gelu(T.linear(h, params[f"{pre}.fc2.w"], params[f"{pre}.fc2.b"]))
        h = T.linear(h, params[f"{pre}.fc3.w"], params[f"{pre}.fc3.b"])
        z = T.add(z, h)
    return z


def cls_vectors(images, spec: ModelSpec, params, *, training=False, rng=None) -> list[Tensor]:
    """Per-camera CLS vectors that feed the head (after fusion, for multi-view models)."""
    tokens = encode_views(images, spec, params, training=training, rng=rng)
    if not spec.multi_view:
        return [T.take_rows(tokens[0], 0, axis=-2)]
    if spec.variant == "mulvit_tf":
        z = fuse_tf(tokens, spec, params, training=training, rng=rng)
    else:
        z = fuse_twdnn(tokens, spec, params)
    stride = spec.encoders[0].tokens
    return [T.take_rows(z, m * stride, axis=-2) for m in range(spec.cameras)]


def forward(images, spec: ModelSpec, params, *, training=False, rng=None) -> Tensor:
    """RSSI estimate in normalized label units, one per sample."""
    f = T.concat(cls_vectors(images, spec, params, training=training, rng=rng), axis=-1)
    return mlp_head(f, params)


def forward_mulvit_tf(images, spec, params, **kw) -> Tensor:
    if spec.variant != "mulvit_tf":
        raise SpecError(f"spec variant is {spec.variant}")
    return forward(images, spec, params, **kw)


def forward_twdnn(images, spec, params, **kw) -> Tensor:
    if spec.variant != "mulvit_twdnn":
        raise SpecError(f"spec variant is {spec.variant}")
    return forward(images, spec, params, **kw)


def forward_sinvit(image, spec, params, **kw) -> Tensor:
    if spec.multi_view:
        raise SpecError(f"spec variant is {spec.variant}")
    return forward(image if isinstance(image, (list, tuple)) else [image], spec, params, **kw)


def num_params(params) -> int:
    return int(sum(p.data.size for p in params.values()))
