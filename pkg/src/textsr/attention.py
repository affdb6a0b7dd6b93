"""Attention primitives and the two positional encodings of the prior
interpreter: a fixed sinusoidal code over sequence steps, and a learnable
recurrent code scanned horizontally over the image feature.

The per-head cross attention is
    CA(e, q) = SM((q Wa)(e Wb)^T / sqrt(d_k)) (e Wc)
with the softmax taken over the key (prior-step) positions for each spatial
query; heads are channel groups that are concatenated and projected by Wo.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import ParamSpec, _batched, _cell, _debatch, gated_cell_layout, linear
from .tensor import DimensionError, Tensor, matmul, softmax_lastdim


@dataclass(frozen=True)
class AttentionConfig:
    heads: int = 4
    channels: int = 64
    key_dim: int = 64

    def __post_init__(self):
        if self.heads < 1:
            raise DimensionError(f"heads must be >= 1, got {self.heads}")
        if self.channels % self.heads:
            raise DimensionError(
                f"channels {self.channels} not divisible by heads {self.heads}")


@dataclass
class AttentionWeights:
    """Per-head query->key probabilities, shape (heads, num_queries, num_keys)
    (a leading batch axis when the forward ran batched)."""
    probs: Tensor

    def numpy(self):
        return self.probs.data

    def row_sums(self):
        return self.probs.data.sum(axis=-1)


# -- positional encodings ------------------------------------------------------


def fixed_positional_encoding(length, channels):
    """Sinusoidal position code: PE(p, 2i) = sin(p / 10000^(2i/channels)),
    PE(p, 2i+1) = cos(same)."""
    if channels % 2:
        raise DimensionError(f"fixed_positional_encoding: channels must be even, got {channels}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(channels // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / channels)
    pe = np.empty((length, channels))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return Tensor(pe)


def rpe_layout(h, w, c):
    layout = {f"cell.{k}": v for k, v in gated_cell_layout(c).items()}
    layout["pos"] = ParamSpec((h, w, c), c)
    return layout


def recurrent_positional_encoding(h, w, c, store, prefix, bidirectional=False):
    """Learnable (h, w, c) parameter passed through a left-to-right gated
    recurrent scan along the width of each row. The optional bidirectional
    flag adds a right-to-left pass with the same cell."""
    from .nn import gated_scan

    pos = store[f"{prefix}.pos"]
    if pos.shape != (h, w, c):
        raise DimensionError(f"recurrent_positional_encoding: parameter {pos.shape} vs {(h, w, c)}")
    cell = _cell(store, f"{prefix}.cell")
    out = gated_scan(pos, *cell)
    if bidirectional:
        out = out + gated_scan(pos.flip(1), *cell).flip(1)
    return out


# -- attention -----------------------------------------------------------------


def cross_attention_head(f_e, f_q, wa, wb, wc):
    """Single-head cross attention; f_e: (l, g) keys/values source, f_q:
    (m, g) query source, projections (g, d_k). Returns (output (m, d_k),
    attention weights (m, l))."""
    if f_e.shape[-1] != wa.shape[0] or f_q.shape[-1] != wa.shape[0]:
        raise DimensionError(
            f"cross_attention_head: feature dims {f_e.shape}/{f_q.shape} vs projection {wa.shape}")
    d_k = wa.shape[1]
    q = matmul(f_q, wa)
    k = matmul(f_e, wb)
    v = matmul(f_e, wc)
    weights = softmax_lastdim(matmul(q, k.transpose_last2()) * (1.0 / np.sqrt(d_k)))
    return matmul(weights, v), weights


def mha_layout(cfg: AttentionConfig):
    n, c, dk = cfg.heads, cfg.channels, cfg.key_dim
    g = c // n
    return {
        "wq": ParamSpec((n, g, dk), g),
        "wk": ParamSpec((n, g, dk), g),
        "wv": ParamSpec((n, g, dk), g),
        "wo": ParamSpec((n * dk, c), n * dk),
    }


def _split_heads(x, n):
    # (b, t, c) -> (b, n, t, c/n)
    b, t, c = x.shape
    return x.reshape(b, t, n, c // n).permute(0, 2, 1, 3)


def _attend(kv_src, q_src, cfg, store, prefix):
    """Shared multi-head attention core; kv_src supplies keys/values, q_src
    supplies queries. Inputs (b, t, c); returns ((b, tq, c), weights)."""
    n, c, dk = cfg.heads, cfg.channels, cfg.key_dim
    if kv_src.shape[-1] != c or q_src.shape[-1] != c:
        raise DimensionError(
            f"attention: channel dims {kv_src.shape}/{q_src.shape} vs config c={c}")
    b = q_src.shape[0]
    kv = _split_heads(kv_src, n)                   # (b, n, l, g)
    q_in = _split_heads(q_src, n)                  # (b, n, m, g)

    def proj(x, w):
        return matmul(x, w.broadcast_to((b,) + w.shape))

    q = proj(q_in, store[f"{prefix}.wq"])          # (b, n, m, dk)
    k = proj(kv, store[f"{prefix}.wk"])            # (b, n, l, dk)
    v = proj(kv, store[f"{prefix}.wv"])
    weights = softmax_lastdim(matmul(q, k.transpose_last2()) * (1.0 / np.sqrt(dk)))
    out = matmul(weights, v)                       # (b, n, m, dk)
    m = out.shape[2]
    out = out.permute(0, 2, 1, 3).reshape(b, m, n * dk)
    return linear(out, store[f"{prefix}.wo"]), weights


def multi_head_cross_attention(f_e, f_q, cfg, store, prefix):
    """Channel-split cross attention of a prior encoding f_e (l, c) against
    position-encoded image features f_q (hw, c); returns the fused (hw, c)
    feature and the per-head attention maps."""
    f_e, had = _batched(f_e, 2, "multi_head_cross_attention")
    f_q, _ = _batched(f_q, 2, "multi_head_cross_attention")
    out, weights = _attend(f_e, f_q, cfg, store, prefix)
    return _debatch(out, had), AttentionWeights(_debatch(weights, had))


def multi_head_self_attention(x, cfg, store, prefix):
    """Multi-head attention with queries, keys and values all drawn from x."""
    x, had = _batched(x, 2, "multi_head_self_attention")
    out, _ = _attend(x, x, cfg, store, prefix)
    return _debatch(out, had)


# -- feed-forward ---------------------------------------------------------------


def ffn_layout(c, hidden):
    return {
        "w1": ParamSpec((c, hidden), c), "b1": ParamSpec((hidden,)),
        "w2": ParamSpec((hidden, c), hidden), "b2": ParamSpec((c,)),
    }


def feed_forward_network(x, store, prefix):
    """Position-wise two-layer network with rectification; residual
    connections are applied by the caller."""
    h = linear(x, store[f"{prefix}.w1"], store[f"{prefix}.b1"]).relu()
    return linear(h, store[f"{prefix}.w2"], store[f"{prefix}.b2"])
