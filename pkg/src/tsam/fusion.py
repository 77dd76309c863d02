"""Attention-weighted fusion of the three modality embeddings.

One global learned attention vector scores each modality embedding; the
softmax over the three logits weights a convex combination. A concat+linear
variant is available behind fusion_mode="concat" for experiments.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ConfigError
from .transformer import xavier


@dataclasses.dataclass
class FusedEntity:
    e_f: object  # Tensor (d,)
    weights: tuple  # (w_str, w_vis, w_txt)


class Fusion:
    def __init__(self, d, mode="weighted", rng=None, store=None):
        if mode not in ("weighted", "concat"):
            raise ConfigError(f"unknown fusion_mode {mode!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d = d
        self.mode = mode
        limit = math.sqrt(6.0 / (1 + d))
        self.params = store if store is not None else {}
        self.params["fusion.alpha"] = Tensor(
            rng.uniform(-limit, limit, size=d).astype(np.float32), requires_grad=True)
        if mode == "concat":
            self.params["fusion.concat_w"] = Tensor(xavier(rng, 3 * d, d),
                                                    requires_grad=True)

    def __call__(self, e_str, e_vis, e_txt):
        """(B, d) triples of modality embeddings -> (e_f (B, d), weights (B, 3))."""
        if self.mode == "concat":
            cat = dc.concat([e_str, e_vis, e_txt], axis=1)
            return dc.matmul(cat, self.params["fusion.concat_w"]), None
        w = attention_weights(e_str, e_vis, e_txt, self.params["fusion.alpha"])
        return fuse(e_str, e_vis, e_txt, w), w


def _rows(t):
    return (dc.reshape(t, (1,) + t.shape), True) if t.ndim == 1 else (t, False)


def attention_weights(e_str, e_vis, e_txt, alpha):
    """Softmax over (alpha . e_str, alpha . e_vis, alpha . e_txt) per row."""
    e_str, squeeze = _rows(e_str)
    e_vis, _ = _rows(e_vis)
    e_txt, _ = _rows(e_txt)
    col = dc.reshape(alpha, (alpha.shape[0], 1))
    logits = dc.concat([dc.matmul(e, col) for e in (e_str, e_vis, e_txt)], axis=1)
    w = dc.softmax(logits)
    return dc.reshape(w, (3,)) if squeeze else w


def fuse(e_str, e_vis, e_txt, weights):
    """e_f = w_s e_str + w_v e_vis + w_t e_txt, rowwise."""
    e_str, squeeze = _rows(e_str)
    e_vis, _ = _rows(e_vis)
    e_txt, _ = _rows(e_txt)
    w, _ = _rows(weights)
    out = e_str * w[:, 0:1] + e_vis * w[:, 1:2] + e_txt * w[:, 2:3]
    return dc.reshape(out, (out.shape[1],)) if squeeze else out


def fuse_single(e_str, e_vis, e_txt, alpha):
    """Convenience single-entity path returning the weights alongside e_f."""
    w = attention_weights(e_str, e_vis, e_txt, alpha)
    e_f = fuse(e_str, e_vis, e_txt, w)
    return FusedEntity(e_f=e_f, weights=tuple(float(x) for x in w.data))
