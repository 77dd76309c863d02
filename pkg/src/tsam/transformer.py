"""Small trainable transformer encoder used for sequence summarization.

Post-norm blocks: x = LN(x + MHA(x)); x = LN(x + FFN(x)). Attention
projections are bias-free; the FFN uses GELU and biases. Parameters live in
a flat name -> Tensor dict so checkpoints can serialize them uniformly.
"""

from __future__ import annotations

import math

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ConfigError


def xavier(rng, fan_in, fan_out, shape=None):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    shape = shape if shape is not None else (fan_in, fan_out)
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


class Transformer:
    """Stack of self-attention blocks over (batch, length, d) inputs."""

    def __init__(self, prefix, layers, heads, d, ffn_dim, rng, store=None):
        if d % heads != 0:
            raise ConfigError(f"model dim {d} not divisible by head count {heads}")
        self.prefix = prefix
        self.layers = layers
        self.heads = heads
        self.d = d
        self.ffn_dim = ffn_dim
        # params may live in a caller-owned dict so swaps there are seen here
        self.params = store if store is not None else {}
        for i in range(layers):
            p = f"{prefix}.l{i}"
            for name in ("wq", "wk", "wv", "wo"):
                self.params[f"{p}.{name}"] = Tensor(xavier(rng, d, d), requires_grad=True)
            self.params[f"{p}.ln1.g"] = Tensor(np.ones(d, np.float32), requires_grad=True)
            self.params[f"{p}.ln1.b"] = Tensor(np.zeros(d, np.float32), requires_grad=True)
            self.params[f"{p}.ffn.w1"] = Tensor(xavier(rng, d, ffn_dim), requires_grad=True)
            self.params[f"{p}.ffn.b1"] = Tensor(np.zeros(ffn_dim, np.float32), requires_grad=True)
            self.params[f"{p}.ffn.w2"] = Tensor(xavier(rng, ffn_dim, d), requires_grad=True)
            self.params[f"{p}.ffn.b2"] = Tensor(np.zeros(d, np.float32), requires_grad=True)
            self.params[f"{p}.ln2.g"] = Tensor(np.ones(d, np.float32), requires_grad=True)
            self.params[f"{p}.ln2.b"] = Tensor(np.zeros(d, np.float32), requires_grad=True)

    def _attend(self, x, i):
        p = self.params
        pre = f"{self.prefix}.l{i}"
        B, L, d = x.shape
        H = self.heads
        dh = d // H

        def split_heads(t):
            return dc.permute(dc.reshape(t, (B, L, H, dh)), (0, 2, 1, 3))

        q = split_heads(dc.matmul(x, p[f"{pre}.wq"]))
        k = split_heads(dc.matmul(x, p[f"{pre}.wk"]))
        v = split_heads(dc.matmul(x, p[f"{pre}.wv"]))
        logits = dc.scale(dc.matmul(q, dc.transpose(k)), 1.0 / math.sqrt(dh))
        ctx = dc.matmul(dc.softmax(logits), v)
        merged = dc.reshape(dc.permute(ctx, (0, 2, 1, 3)), (B, L, d))
        return dc.matmul(merged, p[f"{pre}.wo"])

    def __call__(self, x):
        """x: Tensor (B, L, d) -> Tensor (B, L, d)."""
        p = self.params
        for i in range(self.layers):
            pre = f"{self.prefix}.l{i}"
            x = dc.layer_norm(x + self._attend(x, i), p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
            h = dc.matmul(x, p[f"{pre}.ffn.w1"]) + p[f"{pre}.ffn.b1"]
            h = dc.matmul(dc.gelu(h), p[f"{pre}.ffn.w2"]) + p[f"{pre}.ffn.b2"]
            x = dc.layer_norm(x + h, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
        return x
