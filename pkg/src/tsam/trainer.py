"""Model assembly, the prediction objective, and the training loop.

A query (h, r, ?) becomes the token sequence ([CLS], h_fused, r) fed through
a small transformer decoder; the [CLS] output is scored against every
candidate's fused embedding (score_mode="decoder"), or the configured triple
scoring function runs directly on fused representations (score_mode="kge").
Each training triple is used in both directions via inverse relations.

The loss is the candidate-averaged binary cross-entropy summed with the two
contrastive alignment terms; components toggle off exactly for ablations.
"""

from __future__ import annotations

import dataclasses
import sys
import time

import numpy as np

from . import diffcore as dc
from . import kge as kge_mod
from .data import batch_iter
from .diffcore import Tensor
from .encoder import ModalityEncoder
from .errors import ConfigError, TrainingDivergedError
from .evaluator import evaluate
from .fusion import Fusion
from .sacl import SaclConfig, sacl_loss
from .transformer import Transformer


@dataclasses.dataclass
class TrainConfig:
    dim: int = 64
    score_fn: str = "tucker"
    score_mode: str = "decoder"
    enable_fgmaf: bool = True
    fusion_mode: str = "weighted"
    pooling: str = "ent"
    max_tokens: int = 16
    enc_layers: int = 2
    enc_heads: int = 4
    enc_ffn: int = 128
    pos_visual: bool = False
    pos_textual: bool = True
    dec_layers: int = 2
    dec_heads: int = 4
    dec_ffn: int = 128
    sacl: SaclConfig = dataclasses.field(default_factory=SaclConfig)
    lr: float = 1e-3
    epochs: int = 10
    batch_size: int = 128
    label_smoothing: float = 0.0
    checkpoint_path: str = ""
    log_path: str = ""
    seed: int = 0

    def validate(self):
        if self.batch_size < 2:
            raise ConfigError("train.batch_size must be >= 2")
        if self.epochs < 1:
            raise ConfigError("train.epochs must be >= 1")
        if self.lr < 0:
            raise ConfigError("train.lr must be >= 0")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("train.label_smoothing must be in [0, 1)")
        if self.score_fn not in kge_mod.SCORE_FNS:
            raise ConfigError(f"unknown score_fn {self.score_fn!r}")
        if self.score_mode not in ("decoder", "kge"):
            raise ConfigError(f"unknown score_mode {self.score_mode!r}")
        if self.max_tokens < 1:
            raise ConfigError("data.max_tokens must be >= 1")
        self.sacl.validate()
        if self.sacl.k >= self.batch_size:
            raise ConfigError(
                f"sacl.k={self.sacl.k} must be smaller than batch_size={self.batch_size}")

    @property
    def sacl_active(self):
        return self.sacl.enable_sv or self.sacl.enable_st


class Decoder:
    """Transformer over ([CLS], h_f, r); the [CLS] output is the predicted tail."""

    def __init__(self, layers, heads, d, ffn_dim, rng, store=None):
        self.d = d
        self.params = store if store is not None else {}
        self.transformer = Transformer("dec", layers, heads, d, ffn_dim, rng,
                                       store=self.params)
        self.params["dec.cls"] = Tensor(
            rng.normal(scale=0.02, size=d).astype(np.float32), requires_grad=True)

    def __call__(self, h_f, r):
        Q, d = h_f.shape
        lead = dc.zeros((Q, 1, d)) + dc.reshape(self.params["dec.cls"], (1, 1, d))
        seq = dc.concat([lead, dc.reshape(h_f, (Q, 1, d)), dc.reshape(r, (Q, 1, d))],
                        axis=1)
        return self.transformer(seq)[:, 0]


def decode_tail(h_f, r, decoder):
    """Single-query convenience wrapper: (d,), (d,) -> (d,)."""
    out = decoder(dc.reshape(h_f, (1, h_f.shape[0])), dc.reshape(r, (1, r.shape[0])))
    return dc.reshape(out, (out.shape[1],))


def score_candidates(h_f, r, t_pred, candidates, mode, score_fn=None, core=None):
    """Per-candidate probabilities Theta = sigmoid(Score) over all entities."""
    if mode == "decoder":
        raw = dc.matmul(t_pred, dc.transpose(candidates))
    elif mode == "kge":
        raw = kge_mod.plausibility(score_fn, h_f, r, candidates, core=core)
    else:
        raise ConfigError(f"unknown score_mode {mode!r}")
    return dc.sigmoid(raw)


def prediction_loss(theta, gold_ids, label_smoothing=0.0):
    """Candidate-averaged binary cross-entropy, summed over queries.

    theta: (Q, E) or (E,) probabilities; gold_ids: (Q,) or scalar entity ids.
    Targets are 1 at the gold candidate and 0 elsewhere, optionally smoothed
    to 1-eps / eps/(E-1).
    """
    single = theta.ndim == 1
    if single:
        theta = dc.reshape(theta, (1,) + theta.shape)
    gold = np.atleast_1d(np.asarray(gold_ids, dtype=np.int64))
    Q, E = theta.shape
    if E < 2:
        raise ConfigError("prediction loss needs at least 2 candidate entities")

    clamped = dc.clip(theta, 1e-7, 1.0 - 1e-7)
    cd = clamped.data
    if not np.isfinite(cd).all() or (cd <= 0).any() or (cd >= 1).any():
        raise dc.NumericError("candidate probabilities escaped (0, 1) after clamping")

    log_t = dc.log(clamped)
    log_not = dc.log(dc.neg(clamped) + 1.0)
    logit = log_t - log_not
    sum_not = dc.tsum(log_not, axis=-1)
    gold_logit = logit[np.arange(Q), gold]

    eps = float(label_smoothing)
    if eps == 0.0:
        inner = sum_not + gold_logit
    else:
        spread = dc.scale(dc.tsum(logit, axis=-1) - gold_logit, eps / (E - 1))
        inner = sum_not + spread + dc.scale(gold_logit, 1.0 - eps)
    return dc.tsum(dc.scale(inner, -1.0 / E))


def total_loss(l_p, l_st, l_sv):
    """Unweighted sum; disabled contrastive terms arrive as exact zeros."""
    return l_p + l_st + l_sv


# ---------------------------------------------------------------------------
# model


class Model:
    def __init__(self, store, visual_bank, textual_bank, cfg):
        cfg.validate()
        visual_bank.validate_against(store.entity_count)
        textual_bank.validate_against(store.entity_count)
        rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.store = store
        self.banks = {"visual": visual_bank, "textual": textual_bank}
        self.params = {}

        self.kge = kge_mod.Kge(
            store.entity_count, store.relation_count, cfg.dim, cfg.score_fn, rng,
            store=self.params,
            allocate_core=(cfg.score_fn == "tucker" and cfg.score_mode == "kge"))
        self.encoder = None
        self.fusion = None
        if cfg.enable_fgmaf or cfg.sacl_active:
            self.encoder = ModalityEncoder(
                visual_bank.dim, textual_bank.dim, cfg.dim,
                layers=cfg.enc_layers, heads=cfg.enc_heads, ffn_dim=cfg.enc_ffn,
                max_tokens=cfg.max_tokens, pos_visual=cfg.pos_visual,
                pos_textual=cfg.pos_textual, pooling=cfg.pooling,
                rng=rng, store=self.params)
        if cfg.enable_fgmaf:
            self.fusion = Fusion(cfg.dim, cfg.fusion_mode, rng, store=self.params)
        self.decoder = None
        if cfg.score_mode == "decoder":
            self.decoder = Decoder(cfg.dec_layers, cfg.dec_heads, cfg.dim,
                                   cfg.dec_ffn, rng, store=self.params)

    # -- representations ----------------------------------------------------

    def modality_embeddings(self, entity_ids):
        """(e_vis, e_txt) encoder summaries for the given entities."""
        e_vis = self.encoder.encode_entities(self.banks["visual"], entity_ids, "visual")
        e_txt = self.encoder.encode_entities(self.banks["textual"], entity_ids, "textual")
        return e_vis, e_txt

    def candidate_embeddings(self):
        """Fused embeddings for every entity: (E_f, e_vis_all, e_txt_all)."""
        if not self.cfg.enable_fgmaf:
            return self.kge.entity, None, None
        ids = np.arange(self.store.entity_count)
        e_vis, e_txt = self.modality_embeddings(ids)
        e_f, _ = self.fusion(self.kge.entity, e_vis, e_txt)
        return e_f, e_vis, e_txt

    def relation_inputs(self, rel_ids):
        """Relation rows for scoring: raw rows for the kge path, d-vectors
        (cos||sin expansion for phases) for the decoder path."""
        rows = self.kge.relation[np.asarray(rel_ids, dtype=np.int64)]
        if self.cfg.score_mode == "kge":
            return rows
        if self.cfg.score_fn == "rotate":
            return dc.concat([dc.cos(rows), dc.sin(rows)], axis=1)
        return rows

    def raw_scores(self, h_f, rel_ids, candidates):
        """(Q, E) higher-is-better scores; sigmoid is monotone so ranking
        can use these directly."""
        r = self.relation_inputs(rel_ids)
        if self.cfg.score_mode == "decoder":
            t_pred = self.decoder(h_f, r)
            return dc.matmul(t_pred, dc.transpose(candidates))
        return kge_mod.plausibility(self.cfg.score_fn, h_f, r, candidates,
                                    core=self.kge.core)

    def candidate_scores(self, heads, rels, chunk=512):
        """Evaluation path: plain (Q, E) float array, no graph construction."""
        heads = np.asarray(heads, dtype=np.int64)
        rels = np.asarray(rels, dtype=np.int64)
        with dc.no_grad():
            candidates, _, _ = self.candidate_embeddings()
            out = np.empty((len(heads), self.store.entity_count), dtype=np.float32)
            for start in range(0, len(heads), chunk):
                stop = min(start + chunk, len(heads))
                h_f = candidates[heads[start:stop]]
                out[start:stop] = self.raw_scores(h_f, rels[start:stop], candidates).data
        return out

    def fused_entity_matrix(self):
        """(E, d) fused embeddings as a plain array (for export/inspection)."""
        with dc.no_grad():
            candidates, _, _ = self.candidate_embeddings()
            return np.array(candidates.data)


# ---------------------------------------------------------------------------
# training loop


@dataclasses.dataclass
class EpochStats:
    epoch: int
    l_p: float
    l_sv: float
    l_st: float
    valid_mrr: float
    seconds: float


@dataclasses.dataclass
class TrainResult:
    model: Model
    history: list
    best_epoch: int
    best_valid_mrr: float


def _batch_seed(seed, epoch, batch_index):
    return int(np.random.SeedSequence((seed, epoch, batch_index)).generate_state(1)[0])


def batch_losses(model, batch, epoch, batch_index):
    """(L_p, L_SV, L_ST) tensors for one (B, 3) triple batch."""
    cfg = model.cfg
    h, r, t = batch[:, 0], batch[:, 1], batch[:, 2]
    B = len(batch)
    R = model.store.relation_count

    candidates, e_vis_all, e_txt_all = model.candidate_embeddings()
    q_heads = np.concatenate([h, t])
    q_rels = np.concatenate([r, r + R])
    q_gold = np.concatenate([t, h])

    h_f = candidates[q_heads]
    theta = dc.sigmoid(model.raw_scores(h_f, q_rels, candidates))
    l_p = prediction_loss(theta, q_gold, cfg.label_smoothing)

    zero = Tensor(0.0)
    l_sv, l_st = zero, zero
    if cfg.sacl_active and B >= 2:
        s_rows = model.kge.entity[h]
        if cfg.enable_fgmaf:
            v_rows, t_rows = e_vis_all[h], e_txt_all[h]
        else:
            v_rows, t_rows = model.modality_embeddings(h)
        eff = dataclasses.replace(cfg.sacl, k=min(cfg.sacl.k, B - 1))
        l_sv, l_st = sacl_loss(s_rows, v_rows, t_rows, eff,
                               seed=_batch_seed(cfg.sacl.seed, epoch, batch_index))
    return l_p, l_sv, l_st


def _fill_missing_grads(params):
    # parameters absent from this batch's graph legitimately get zero updates
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)


def train(store, visual_bank, textual_bank, cfg, log_stream=None, config_text=""):
    """Run the optimization loop; return the model restored to its best epoch.

    Writes one log line per epoch (epoch, L_p, L_SV, L_ST, valid MRR). The
    model with the best filtered valid MRR is kept; if checkpoint_path is
    set the caller is expected to persist it via the checkpoint module.
    """
    cfg.validate()
    model = Model(store, visual_bank, textual_bank, cfg)
    names = sorted(model.params)
    params = [model.params[n] for n in names]
    opt = dc.Adam(params, lr=cfg.lr)

    log = log_stream if log_stream is not None else sys.stdout
    if config_text:
        for line in config_text.rstrip("\n").split("\n"):
            print(f"# {line}", file=log)
    print("epoch\tl_p\tl_sv\tl_st\tvalid_mrr", file=log)

    history = []
    best_mrr = -1.0
    best_epoch = -1
    best_params = None
    best_adam = None
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        sums = np.zeros(3)
        batches = 0
        shuffle = _batch_seed(cfg.seed, epoch, 0)
        for b_idx, batch in enumerate(batch_iter(store, "train", cfg.batch_size, shuffle)):
            l_p, l_sv, l_st = batch_losses(model, batch, epoch, b_idx)
            total = total_loss(l_p, l_st, l_sv)
            if not np.isfinite(total.data):
                raise TrainingDivergedError(epoch, b_idx)
            opt.zero_grad()
            dc.backward(total)
            _fill_missing_grads(params)
            opt.step()
            sums += (l_p.item(), l_sv.item(), l_st.item())
            batches += 1

        valid_mrr = evaluate(model, store, "valid", filtered=True).overall.mrr
        stats = EpochStats(epoch, *(sums / batches), valid_mrr,
                           time.perf_counter() - t0)
        history.append(stats)
        print(f"{epoch}\t{stats.l_p:.6f}\t{stats.l_sv:.6f}\t{stats.l_st:.6f}"
              f"\t{valid_mrr:.6f}", file=log)

        if valid_mrr > best_mrr:
            best_mrr = valid_mrr
            best_epoch = epoch
            best_params = {n: model.params[n].data.copy() for n in names}
            best_adam = (opt.state.step,
                         [m.copy() for m in opt.state.m],
                         [v.copy() for v in opt.state.v])

    for n in names:
        model.params[n].data = best_params[n].copy()
    opt.state.step = best_adam[0]
    opt.state.m = [m.copy() for m in best_adam[1]]
    opt.state.v = [v.copy() for v in best_adam[2]]
    model.optimizer = opt
    model.best_epoch = best_epoch
    return TrainResult(model=model, history=history, best_epoch=best_epoch,
                       best_valid_mrr=best_mrr)
