"""Structural embeddings and the three triple-scoring functions.

Scores follow a single convention downstream: higher means more plausible.
The bilinear-core score is used as-is; the two distance-based scores expose
the raw distance per their definitions, and ranking consumes the negated
distance through `plausibility`.

Relation tables cover inverse relations (row r + relation_count scores the
relation read backwards), so head prediction reuses tail machinery.
"""

from __future__ import annotations

import math

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ConfigError

SCORE_FNS = ("tucker", "transe", "rotate")

# keeps sqrt differentiable when a distance hits exactly zero
_DIST_EPS = 1e-12


def _row_xavier(rng, rows, d):
    limit = math.sqrt(6.0 / (1 + d))
    return rng.uniform(-limit, limit, size=(rows, d)).astype(np.float32)


class Kge:
    """Entity/relation parameter tables for one scoring function."""

    def __init__(self, entity_count, relation_count, d, score_fn, rng=None,
                 store=None, allocate_core=None):
        if score_fn not in SCORE_FNS:
            raise ConfigError(f"unknown score_fn {score_fn!r}")
        if entity_count <= 0 or relation_count <= 0:
            raise ConfigError("entity_count and relation_count must be positive")
        if score_fn == "rotate" and d % 2 != 0:
            raise ConfigError("rotate needs an even dimension (complex pairs)")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.entity_count = entity_count
        self.relation_count = relation_count
        self.d = d
        self.score_fn = score_fn

        self.params = store if store is not None else {}
        self.params["kge.entity"] = Tensor(_row_xavier(rng, entity_count, d),
                                           requires_grad=True)
        rel_rows = 2 * relation_count
        if score_fn == "rotate":
            phases = rng.uniform(0.0, 2.0 * math.pi, size=(rel_rows, d // 2))
            self.params["kge.relation"] = Tensor(phases.astype(np.float32),
                                                 requires_grad=True)
        else:
            self.params["kge.relation"] = Tensor(_row_xavier(rng, rel_rows, d),
                                                 requires_grad=True)
        if allocate_core is None:
            allocate_core = score_fn == "tucker"
        if allocate_core and score_fn == "tucker":
            core = rng.normal(0.0, 0.1, size=(d, d, d)).astype(np.float32)
            self.params["kge.core"] = Tensor(core, requires_grad=True)

    @property
    def entity(self):
        return self.params["kge.entity"]

    @property
    def relation(self):
        return self.params["kge.relation"]

    @property
    def core(self):
        return self.params.get("kge.core")


def _as_batch(t):
    return (dc.reshape(t, (1,) + t.shape), True) if t.ndim == 1 else (t, False)


def score_tucker(h, r, core, candidates):
    """score[b, n] = sum_ijk core_ijk h[b]_i r[b]_j cand[n]_k."""
    h, squeeze = _as_batch(h)
    r, _ = _as_batch(r)
    B, d = h.shape
    mixed = dc.reshape(dc.matmul(h, dc.reshape(core, (d, d * d))), (B, d, d))
    hr = dc.reshape(dc.matmul(dc.reshape(r, (B, 1, d)), mixed), (B, d))
    scores = dc.matmul(hr, dc.transpose(candidates))
    return dc.reshape(scores, (scores.shape[1],)) if squeeze else scores


def score_transe(h, r, t):
    """Translation distance ||h + r - t||_2 over the last axis (lower = better)."""
    gap = h + r - t
    return dc.sqrt(dc.tsum(dc.square(gap), axis=-1) + _DIST_EPS)


def transe_distances(h, r, candidates):
    """(B, d) queries against (E, d) candidates -> (B, E) distances."""
    B, d = h.shape
    hr = dc.reshape(h + r, (B, 1, d))
    diff = hr - dc.reshape(candidates, (1,) + candidates.shape)
    return dc.sqrt(dc.tsum(dc.square(diff), axis=-1) + _DIST_EPS)


def _split_complex(x):
    half = x.shape[-1] // 2
    return x[..., :half], x[..., half:]


def _rotate_head(h, theta):
    """Apply the phase rotation e^{i theta} to h's complex pairs."""
    hre, him = _split_complex(h)
    tre, tim = dc.cos(theta), dc.sin(theta)
    return hre * tre - him * tim, hre * tim + him * tre


def score_rotate(h, theta, t):
    """Sum of component-wise complex moduli |h.e^{i theta} - t| (lower = better)."""
    rre, rim = _rotate_head(h, theta)
    tre, tim = _split_complex(t)
    dre, dim = rre - tre, rim - tim
    return dc.tsum(dc.sqrt(dc.square(dre) + dc.square(dim) + _DIST_EPS), axis=-1)


def rotate_distances(h, theta, candidates):
    B = h.shape[0]
    half = h.shape[-1] // 2
    rre, rim = _rotate_head(h, theta)
    cre, cim = _split_complex(candidates)
    dre = dc.reshape(rre, (B, 1, half)) - dc.reshape(cre, (1,) + cre.shape)
    dim = dc.reshape(rim, (B, 1, half)) - dc.reshape(cim, (1,) + cim.shape)
    return dc.tsum(dc.sqrt(dc.square(dre) + dc.square(dim) + _DIST_EPS), axis=-1)


def plausibility(score_fn, h, r, candidates, core=None):
    """(B, E) higher-is-better scores for every candidate tail."""
    if score_fn == "tucker":
        if core is None:
            raise ConfigError("tucker scoring requires the core tensor")
        return score_tucker(h, r, core, candidates)
    if score_fn == "transe":
        return dc.neg(transe_distances(h, r, candidates))
    if score_fn == "rotate":
        return dc.neg(rotate_distances(h, r, candidates))
    raise ConfigError(f"unknown score_fn {score_fn!r}")
