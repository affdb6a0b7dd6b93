"""The full reconstruction pipeline: a 9x9 feature head, a toy convolutional
text recognizer producing the character-probability prior, the prior
interpreter, a chain of prior-guided recurrent blocks (element-wise addition
of the guidance map followed by a sequential-recurrent block), and a final
conv + pixel-shuffle tail that doubles the resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import interpreter as tpi
from . import nn
from .attention import AttentionConfig
from .tensor import ContractError, DimensionError, Tensor, softmax_lastdim


@dataclass(frozen=True)
class NetworkConfig:
    """Geometry and width knobs. The paper-scale defaults are below; every
    field can be reduced for desk-scale runs."""
    height: int = 16
    width: int = 64
    scale: int = 2
    channels: int = 64
    tpgb_count: int = 5
    heads: int = 4
    key_dim: int = 64          # d_k for attention projections and the FFN width
    prior_len: int = 16        # one prior step per 4 pixels of width by default
    alphabet: int = 37
    tpg_channels: tuple = (32, 64)
    enc_layers: int = 1
    dec_layers: int = 1
    rpe_bidirectional: bool = False
    use_tp: bool = True

    def __post_init__(self):
        if self.width % 4:
            raise ContractError(f"width {self.width} must be divisible by 4")
        if self.channels % self.heads:
            raise ContractError(f"channels {self.channels} not divisible by heads {self.heads}")
        if self.width % self.prior_len:
            raise ContractError(f"width {self.width} not divisible by prior length {self.prior_len}")
        stride = self.width // self.prior_len
        if stride & (stride - 1) or stride < 2:
            raise ContractError(f"width/prior_len must be a power of two >= 2, got {stride}")
        if len(self.tpg_channels) != self.tpg_pools:
            raise ContractError(
                f"tpg_channels {self.tpg_channels} must have one entry per pooling "
                f"stage ({self.tpg_pools})")
        if self.height % stride:
            raise ContractError(f"height {self.height} not divisible by recognizer stride {stride}")

    @property
    def tpg_pools(self):
        return int(np.log2(self.width // self.prior_len))

    @property
    def attention(self):
        return AttentionConfig(self.heads, self.channels, self.key_dim)

    @property
    def hr_size(self):
        return (self.height * self.scale, self.width * self.scale)

    def reduced(self, **overrides):
        return replace(self, **overrides)


def mini_config(**overrides):
    """Desk/CI configuration: paper geometry, half-width features."""
    base = dict(channels=32, key_dim=32, tpg_channels=(16, 32))
    base.update(overrides)
    return NetworkConfig(**base)


def gradcheck_config(**overrides):
    """Miniature configuration for finite-difference suites."""
    base = dict(height=4, width=8, channels=8, heads=2, key_dim=8,
                prior_len=4, tpgb_count=1, tpg_channels=(6,))
    base.update(overrides)
    return NetworkConfig(**base)


# -- parameter layout -----------------------------------------------------------


def param_layout(cfg: NetworkConfig):
    c = cfg.channels
    layout = {
        "head.conv.w": nn.ParamSpec((9, 9, 3, c), 9 * 9 * 3),
        "head.conv.b": nn.ParamSpec((c,)),
        "tail.conv.w": nn.ParamSpec((3, 3, c, cfg.scale * cfg.scale * 3), 9 * c),
        "tail.conv.b": nn.ParamSpec((cfg.scale * cfg.scale * 3,)),
    }
    cin = 3
    for i, cout in enumerate(cfg.tpg_channels):
        layout[f"tpg.conv{i}.w"] = nn.ParamSpec((3, 3, cin, cout), 9 * cin)
        layout[f"tpg.conv{i}.b"] = nn.ParamSpec((cout,))
        cin = cout
    layout["tpg.out.w"] = nn.ParamSpec((cin, cfg.alphabet), cin)
    layout["tpg.out.b"] = nn.ParamSpec((cfg.alphabet,))
    layout.update(tpi.interpreter_layout(
        cfg.attention, cfg.height, cfg.width, ffn_hidden=cfg.key_dim,
        enc_layers=cfg.enc_layers, dec_layers=cfg.dec_layers, alphabet=cfg.alphabet))
    for i in range(cfg.tpgb_count):
        layout.update({f"tpgb{i}.{k}": v for k, v in nn.srb_layout(c).items()})
    return layout


def init_params(cfg: NetworkConfig, seed):
    """Deterministic fan-in-uniform initialization of the full network."""
    return nn.init_params(param_layout(cfg), seed)


# -- forward passes ----------------------------------------------------------------


def _check_image(y, cfg, what):
    if y.shape[-1] != 3 or y.ndim not in (3, 4):
        raise DimensionError(f"{what}: expected (h, w, 3) image, got {y.shape}")
    lr = (cfg.height, cfg.width)
    hr = cfg.hr_size
    if y.shape[-3:-1] not in (lr, hr):
        raise DimensionError(f"{what}: spatial dims {y.shape[-3:-1]} match neither "
                             f"LR {lr} nor HR {hr}")
    lo, hi = float(y.data.min()), float(y.data.max())
    if lo < -1e-6 or hi > 1.0 + 1e-6:
        raise ContractError(f"{what}: pixel values outside [0, 1] (range [{lo:.3g}, {hi:.3g}])")


def extract_image_feature(y, store, cfg: NetworkConfig):
    """9x9 same-padding convolution of the LR image to c channels."""
    _check_image(y, cfg, "extract_image_feature")
    if y.shape[-3:-1] != (cfg.height, cfg.width):
        raise DimensionError(f"extract_image_feature: expected LR geometry "
                             f"{(cfg.height, cfg.width)}, got {y.shape}")
    return nn.conv2d(y, store["head.conv.w"], "same", store["head.conv.b"])


def generate_text_prior(img, store, cfg: NetworkConfig):
    """Toy recognizer: conv stack with total width-stride w/l and full height
    collapse, then per-step softmax rows over the alphabet. HR inputs are
    average-pooled to LR geometry first."""
    _check_image(img, cfg, "generate_text_prior")
    x = img
    if x.shape[-3:-1] == cfg.hr_size:
        x = nn.avg_pool2(x)
    for i in range(cfg.tpg_pools):
        x = nn.conv2d(x, store[f"tpg.conv{i}.w"], "same", store[f"tpg.conv{i}.b"]).relu()
        x = nn.avg_pool2(x)
    x, had = nn._batched(x, 3, "generate_text_prior")
    x = x.mean(axis=1)                       # collapse remaining height
    logits = nn.linear(x, store["tpg.out.w"], store["tpg.out.b"])
    return tpi.TextPrior(nn._debatch(softmax_lastdim(logits), had))


def tpgb_forward(tp_map, f, store, prefix):
    """One prior-guided block: merge the guidance map by element-wise
    addition, then run the sequential-recurrent block."""
    return nn.srb_forward(f + tp_map, store, prefix)


def interpret_prior(prior, f_i, store, cfg: NetworkConfig):
    f_e = tpi.encode_prior(prior, cfg.attention, store, enc_layers=cfg.enc_layers)
    return tpi.decode_to_tp_map(f_e, f_i, cfg.attention, store,
                                dec_layers=cfg.dec_layers,
                                rpe_bidirectional=cfg.rpe_bidirectional)


def reconstruct_sr(y, store, cfg: NetworkConfig, clamp=False):
    """Full pipeline LR -> SR. Returns (sr image, text prior, attention
    weights); the latter two are None when the prior branch is disabled.
    The SR output is unclamped unless `clamp` is set (evaluation)."""
    f_i = extract_image_feature(y, store, cfg)
    prior = weights = None
    if cfg.use_tp:
        prior = generate_text_prior(y, store, cfg)
        tp_map, weights = interpret_prior(prior, f_i, store, cfg)
    else:
        tp_map = Tensor(np.zeros(f_i.shape, dtype=f_i.dtype))
    f = f_i
    for i in range(cfg.tpgb_count):
        f = tpgb_forward(tp_map, f, store, f"tpgb{i}")
    out = nn.conv2d(f, store["tail.conv.w"], "same", store["tail.conv.b"])
    sr = nn.pixel_shuffle(out, cfg.scale)
    if clamp:
        sr = sr.clip(0.0, 1.0)
    return sr, prior, weights
