"""Prior interpreter: encodes the character-probability sequence, then
cross-attends it against position-encoded image features to produce the
spatial guidance map.

Encoder: project the prior to c channels, add the fixed sinusoidal code,
then one or more (self-attention + feed-forward) layers with post-norm
residuals. Decoder: add the recurrent positional code to the image feature,
flatten it to a query sequence, and run (cross-attention + feed-forward)
layers the same way; the output is reshaped back to (h, w, c).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import attention as att
from .nn import ParamSpec, _batched, _debatch, layer_norm, linear
from .tensor import ContractError, DimensionError, Tensor

ALPHABET_SIZE = 37  # '0'-'9', 'a'-'z', and one blank class


@dataclass
class TextPrior:
    """Length-l sequence of categorical probability rows over the alphabet."""
    probs: Tensor

    def __post_init__(self):
        p = self.probs
        if p.ndim not in (2, 3) or p.shape[-1] != ALPHABET_SIZE:
            raise ContractError(
                f"text prior must be (l, {ALPHABET_SIZE}) or batched, got {p.shape}")
        self.validate()

    def validate(self):
        d = self.probs.data
        if d.min() < -1e-9:
            raise ContractError(f"text prior has negative probabilities (min {d.min():.3g})")
        sums = d.sum(axis=-1)
        if np.abs(sums - 1.0).max() > 1e-6:
            raise ContractError("text prior rows are not normalized "
                                f"(worst sum {sums.flat[np.abs(sums - 1.0).argmax()]:.8f})")

    @property
    def length(self):
        return self.probs.shape[-2]


def interpreter_layout(cfg: att.AttentionConfig, h, w, ffn_hidden,
                       enc_layers=1, dec_layers=1, alphabet=ALPHABET_SIZE):
    layout = {
        "enc.proj.w": ParamSpec((alphabet, cfg.channels), alphabet),
        "enc.proj.b": ParamSpec((cfg.channels,)),
    }
    for i in range(enc_layers):
        layout.update(_block_layout(f"enc.l{i}", "msa", cfg, ffn_hidden))
    for i in range(dec_layers):
        layout.update(_block_layout(f"dec.l{i}", "mca", cfg, ffn_hidden))
    layout.update({f"rpe.{k}": v for k, v in att.rpe_layout(h, w, cfg.channels).items()})
    return layout


def _block_layout(prefix, kind, cfg, ffn_hidden):
    c = cfg.channels
    layout = {f"{prefix}.{kind}.{k}": v for k, v in att.mha_layout(cfg).items()}
    layout.update({f"{prefix}.ffn.{k}": v for k, v in att.ffn_layout(c, ffn_hidden).items()})
    for ln in ("ln1", "ln2"):
        layout[f"{prefix}.{ln}.g"] = ParamSpec((c,), const=1.0)
        layout[f"{prefix}.{ln}.b"] = ParamSpec((c,))
    return layout


def _post_norm(x, sub, store, prefix):
    return layer_norm(x + sub, store[f"{prefix}.g"], store[f"{prefix}.b"])


def encode_prior(prior: TextPrior, cfg, store, enc_layers=1):
    """Contextually enhance the text prior; returns (l, c) (batched when the
    prior is batched)."""
    prior.validate()
    x, had = _batched(prior.probs, 2, "encode_prior")
    x = linear(x, store["enc.proj.w"], store["enc.proj.b"])
    fpe = att.fixed_positional_encoding(x.shape[1], cfg.channels)
    x = x + fpe.broadcast_to(x.shape)
    for i in range(enc_layers):
        p = f"enc.l{i}"
        x = _post_norm(x, att.multi_head_self_attention(x, cfg, store, f"{p}.msa"),
                       store, f"{p}.ln1")
        x = _post_norm(x, att.feed_forward_network(x, store, f"{p}.ffn"),
                       store, f"{p}.ln2")
    return _debatch(x, had)


def decode_to_tp_map(f_e, f_i, cfg, store, dec_layers=1, rpe_bidirectional=False):
    """Correlate the encoded prior with the image feature; returns the
    (h, w, c) guidance map and the cross-attention weights."""
    f_i, had = _batched(f_i, 3, "decode_to_tp_map")
    f_e_b, _ = _batched(f_e, 2, "decode_to_tp_map")
    b, h, w, c = f_i.shape
    if c != cfg.channels or f_e_b.shape[-1] != c:
        raise DimensionError(
            f"decode_to_tp_map: channels {f_e_b.shape[-1]}/{c} vs config {cfg.channels}")
    rpe = att.recurrent_positional_encoding(h, w, c, store, "rpe",
                                            bidirectional=rpe_bidirectional)
    f_iq = f_i + rpe.reshape((1, h, w, c)).broadcast_to(f_i.shape)
    x = f_iq.reshape(b, h * w, c)
    weights = None
    for i in range(dec_layers):
        p = f"dec.l{i}"
        sub, weights = att.multi_head_cross_attention(f_e_b, x, cfg, store, f"{p}.mca")
        x = _post_norm(x, sub, store, f"{p}.ln1")
        x = _post_norm(x, att.feed_forward_network(x, store, f"{p}.ffn"),
                       store, f"{p}.ln2")
    tp_map = x.reshape(b, h, w, c)
    if not had:
        tp_map = tp_map.reshape(h, w, c)
        weights = att.AttentionWeights(weights.probs.reshape(weights.probs.shape[1:]))
    return tp_map, weights


def attention_heatmap_extract(weights: att.AttentionWeights, char_index, h, w):
    """Mean over heads of one character's attention column, reshaped to
    (h, w) and min-max normalized to [0, 1]; constant maps normalize to
    all-zero."""
    probs = weights.numpy()
    if probs.ndim != 3:
        raise ContractError("heatmap extraction expects per-sample weights (heads, hw, l)")
    n, hw, l = probs.shape
    if not 0 <= char_index < l:
        raise IndexError(f"char_index {char_index} out of range for prior length {l}")
    if hw != h * w:
        raise ContractError(f"weights cover {hw} positions, expected {h}x{w}")
    col = probs[:, :, char_index].mean(axis=0).reshape(h, w)
    lo, hi = col.min(), col.max()
    if hi - lo == 0.0:
        return Tensor(np.zeros((h, w)))
    return Tensor((col - lo) / (hi - lo))
