"""Structure-aware contrastive alignment over in-batch negatives.

Four directional InfoNCE terms tie the visual and textual embeddings of a
batch's entities to their structural embeddings: L_SV = L(S->V) + L(V->S)
and L_ST = L(S->T) + L(T->S). Similarities are cosine; negatives are K
other rows of the same batch, sampled independently per direction.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ConfigError


@dataclasses.dataclass
class SaclConfig:
    tau: float = 0.02
    k: int = 16
    enable_sv: bool = True
    enable_st: bool = True
    seed: int = 0

    def validate(self):
        if self.tau <= 0:
            raise ConfigError("sacl.tau must be positive")
        if self.k < 1:
            raise ConfigError("sacl.k must be >= 1")


def sample_negatives(batch_size, k, seed):
    """(B, K) indices; row i holds K distinct draws from {0..B-1} minus i."""
    if k > batch_size - 1:
        raise ConfigError(f"k={k} negatives need batch_size >= {k + 1}, got {batch_size}")
    rng = np.random.default_rng(seed)
    out = np.empty((batch_size, k), dtype=np.int64)
    for i in range(batch_size):
        draw = rng.choice(batch_size - 1, size=k, replace=False)
        out[i] = np.where(draw >= i, draw + 1, draw)
    return out


def _normalize_rows(x):
    norms = np.sqrt((x.data ** 2).sum(axis=-1))
    if (norms < 1e-8).any():
        raise dc.NumericError("cosine similarity over a zero-norm embedding row")
    return x / dc.sqrt(dc.tsum(dc.square(x), axis=-1, keepdims=True))


def info_nce(anchors, positives, negatives, tau):
    """Mean over rows of -log[ exp(s_pos/tau) / (exp(s_pos/tau) + sum_j exp(s_neg_j/tau)) ].

    anchors, positives: (B, d); negatives: (B, K, d); s = cosine similarity.
    """
    if tau <= 0:
        raise ConfigError("tau must be positive")
    B, d = anchors.shape
    a = _normalize_rows(anchors)
    p = _normalize_rows(positives)
    n = _normalize_rows(negatives)
    sim_pos = dc.tsum(a * p, axis=-1, keepdims=True)  # (B, 1)
    sim_neg = dc.tsum(dc.reshape(a, (B, 1, d)) * n, axis=-1)  # (B, K)
    logits = dc.scale(dc.concat([sim_pos, sim_neg], axis=1), 1.0 / tau)
    per_row = dc.logsumexp(logits, axis=-1) - logits[:, 0]
    return dc.mean(per_row)


def sacl_loss(s, v, t, cfg, seed=None):
    """(L_SV, L_ST) for batch modality matrices s, v, t of shape (B, d).

    Disabled components return an exact scalar zero. Each of the four
    directions draws its own negative index matrix.
    """
    cfg.validate()
    B = s.shape[0]
    if B < 2:
        raise ConfigError("sacl needs batch_size >= 2")
    if cfg.k > B - 1:
        raise ConfigError(f"sacl.k={cfg.k} too large for batch of {B}")
    base = cfg.seed if seed is None else seed

    def direction(anchors, others, lane):
        idx = sample_negatives(B, cfg.k, np.random.default_rng([base, lane]).integers(2 ** 63))
        return info_nce(anchors, others, others[idx], cfg.tau)

    zero = Tensor(0.0)
    l_sv = direction(s, v, 0) + direction(v, s, 1) if cfg.enable_sv else zero
    l_st = direction(s, t, 2) + direction(t, s, 3) if cfg.enable_st else zero
    return l_sv, l_st
