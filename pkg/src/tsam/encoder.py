"""Token-level modality encoding: projection into the shared space plus a
trainable transformer that summarizes each token sequence into one vector.

Both modalities share the transformer; each has its own projection and a
learned placeholder token used when an entity has no tokens in the bank.
The summary vector is the hidden state at a learned prefix token prepended
to every sequence (mean pooling available behind a flag).
"""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ConfigError
from .transformer import Transformer, xavier

MODALITIES = ("visual", "textual")


class ModalityEncoder:
    def __init__(self, visual_dim, textual_dim, d, layers=2, heads=4, ffn_dim=128,
                 max_tokens=16, pos_visual=False, pos_textual=True,
                 pooling="ent", rng=None, store=None):
        if pooling not in ("ent", "mean"):
            raise ConfigError(f"unknown pooling mode {pooling!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d = d
        self.max_tokens = max_tokens
        self.pooling = pooling
        self.token_dims = {"visual": visual_dim, "textual": textual_dim}
        self.positional = {"visual": pos_visual, "textual": pos_textual}

        self.params = store if store is not None else {}
        self.transformer = Transformer("enc", layers, heads, d, ffn_dim, rng,
                                       store=self.params)
        self.params["enc.ent"] = Tensor(
            rng.normal(scale=0.02, size=d).astype(np.float32), requires_grad=True)
        for mod in MODALITIES:
            td = self.token_dims[mod]
            self.params[f"proj.{mod}.w"] = Tensor(xavier(rng, td, d), requires_grad=True)
            self.params[f"proj.{mod}.b"] = Tensor(np.zeros(d, np.float32), requires_grad=True)
            self.params[f"placeholder.{mod}"] = Tensor(
                rng.normal(scale=0.02, size=td).astype(np.float32), requires_grad=True)
            if self.positional[mod]:
                self.params[f"pos.{mod}"] = Tensor(
                    rng.normal(scale=0.02, size=(max_tokens + 1, d)).astype(np.float32),
                    requires_grad=True)

    # -- single-sequence API ------------------------------------------------

    def project_tokens(self, tokens, modality):
        """(L, token_dim) -> (L, d): out_i = W tokens_i + b."""
        w = self.params[f"proj.{modality}.w"]
        b = self.params[f"proj.{modality}.b"]
        x = tokens if isinstance(tokens, Tensor) else Tensor(np.asarray(tokens))
        if x.ndim != 2 or x.shape[-1] != w.shape[0]:
            raise dc.ShapeError(
                f"{modality} tokens shaped {x.shape}, projection expects (*, {w.shape[0]})")
        return dc.matmul(x, w) + b

    def encode_sequence(self, projected, modality=None):
        """(L, d) projected tokens -> d-vector summary."""
        x = projected if isinstance(projected, Tensor) else Tensor(np.asarray(projected))
        if x.ndim != 2 or x.shape[0] < 1:
            raise dc.ShapeError(f"expected a non-empty (L, {self.d}) sequence, got {x.shape}")
        out = self._encode(dc.reshape(x, (1,) + x.shape), modality)
        return dc.reshape(out, (self.d,))

    # -- batched API --------------------------------------------------------

    def _encode(self, x, modality):
        """x: Tensor (B, L, d) already projected -> (B, d) summaries."""
        B, L, d = x.shape
        ent = dc.reshape(self.params["enc.ent"], (1, 1, d))
        lead = dc.zeros((B, 1, d)) + ent
        x = dc.concat([lead, x], axis=1)
        if modality is not None and self.positional[modality]:
            table = self.params[f"pos.{modality}"]
            x = x + dc.reshape(table[:L + 1], (1, L + 1, d))
        h = self.transformer(x)
        if self.pooling == "mean":
            return dc.mean(h, axis=1)
        return h[:, 0]

    def encode_entities(self, bank, entity_ids, modality):
        """Summarize bank sequences for `entity_ids` -> Tensor (B, d).

        Sequences are truncated to max_tokens and batched by length so each
        group runs as one transformer call. Entities missing from the bank
        are encoded through the learned placeholder token.
        """
        ids = [int(e) for e in entity_ids]
        groups = {}  # length -> (positions, raw token arrays)
        missing = []
        for pos, eid in enumerate(ids):
            seq = bank.sequences.get(eid)
            if seq is None or len(seq) == 0:
                missing.append(pos)
                continue
            seq = seq[:self.max_tokens]
            groups.setdefault(seq.shape[0], ([], []))
            groups[seq.shape[0]][0].append(pos)
            groups[seq.shape[0]][1].append(seq)

        pieces = []
        order = []
        for length in sorted(groups):
            positions, seqs = groups[length]
            raw = Tensor(np.stack(seqs))
            pieces.append(self._encode(self.project_tokens_batch(raw, modality), modality))
            order.extend(positions)
        if missing:
            td = self.token_dims[modality]
            ph = dc.reshape(self.params[f"placeholder.{modality}"], (1, 1, td))
            one = self._encode(self.project_tokens_batch(ph, modality), modality)
            pieces.append(one[np.zeros(len(missing), dtype=np.int64)])
            order.extend(missing)

        stacked = pieces[0] if len(pieces) == 1 else dc.concat(pieces, axis=0)
        inverse = np.empty(len(ids), dtype=np.int64)
        inverse[np.asarray(order)] = np.arange(len(ids))
        if np.array_equal(inverse, np.arange(len(ids))):
            return stacked
        return stacked[inverse]

    def project_tokens_batch(self, tokens, modality):
        w = self.params[f"proj.{modality}.w"]
        b = self.params[f"proj.{modality}.b"]
        return dc.matmul(tokens, w) + b
