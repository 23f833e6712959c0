import numpy as np
import pytest

from multiview_rssi import models as M
from multiview_rssi import tensor as T


def fd_gradients(fn, inputs, h=1e-4, entries=None, rng=None):
    """Central finite differences of scalar ``fn()`` w.r.t. tensors in ``inputs``.

    ``entries`` caps the number of probed coordinates per tensor (random
    subset); ``None`` probes all of them. Returns {name: (index_list, fd_values)}.
    """
    out = {}
    rng = rng or np.random.default_rng(0)
    for name, t in inputs.items():
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if entries is not None and flat.size > entries:
            idx = rng.choice(flat.size, entries, replace=False)
        vals = np.empty(idx.size)
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            up = float(fn().data)
            flat[i] = old - h
            dn = float(fn().data)
            flat[i] = old
            vals[j] = (up - dn) / (2 * h)
        out[name] = (idx, vals)
    return out


def grad_rel_error(fn, inputs, h=1e-4, entries=None, rng=None) -> float:
    """Norm-wise relative error between backward gradients and finite differences."""
    for t in inputs.values():
        t.grad = None
    T.backward(fn())
    fd = fd_gradients(fn, inputs, h, entries, rng)
    grads = {k: np.zeros(t.shape) if t.grad is None else t.grad for k, t in inputs.items()}
    an = np.concatenate([grads[k].reshape(-1)[idx] for k, (idx, _) in fd.items()])
    num = np.concatenate([v for _, v in fd.values()])
    scale = max(np.linalg.norm(num), np.linalg.norm(an), 1e-12)
    return float(np.linalg.norm(an - num) / scale)


def tiny_spec(variant="mulvit_tf", **kw):
    base = dict(image_height=16, image_width=32, embed_dim=8, depth=2, heads=2, fusion_depth=1,
                twdnn_blocks=2, twdnn_hidden=12, head_hidden=6, dropout=0.0)
    base.update(kw)
    return M.preset(variant, **base)


def toy_spec(variant="mulvit_tf", **kw):
    """Two tokens per camera: one 4x4 patch plus CLS."""
    base = dict(image_height=4, image_width=4, patch_size=4, embed_dim=4, depth=1, heads=2,
                fusion_depth=1, twdnn_blocks=1, twdnn_hidden=5, head_hidden=3, dropout=0.0)
    base.update(kw)
    return M.preset(variant, **base)


def randomize(params, rng, scale=0.5):
    for p in params.values():
        p.data[...] = rng.normal(0.0, scale, p.shape).astype(p.dtype)
    return params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
