"""Parameterized neural building blocks: convolution, affine maps, layer
normalization, pixel shuffle, and the gated recurrent scans used by the
sequential-recurrent blocks and the positional encoding.

Blocks are pure functions of (input tensors, parameters); parameters live in
a `ParamStore` keyed by hierarchical paths with deterministic (sorted)
iteration order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ContractError, DimensionError, Tensor, _sigmoid


@dataclass(frozen=True)
class ParamSpec:
    """Shape plus init rule for one parameter: uniform scaled by fan_in when
    given, a fixed constant when `const` is given (normalization gains),
    zeros otherwise (biases)."""
    shape: tuple
    fan_in: int | None = None
    const: float | None = None


class ParamStore:
    """Named map from hierarchical path to parameter tensor."""

    def __init__(self):
        self._params = {}
        self._trainable = {}

    def add(self, path, t, trainable=True):
        if path in self._params:
            raise ContractError(f"duplicate parameter path {path!r}")
        self._params[path] = t
        self._trainable[path] = trainable
        return t

    def __getitem__(self, path):
        return self._params[path]

    def __contains__(self, path):
        return path in self._params

    def __len__(self):
        return len(self._params)

    def paths(self):
        return sorted(self._params)

    def items(self):
        return [(p, self._params[p]) for p in self.paths()]

    def trainable_items(self):
        return [(p, t) for p, t in self.items() if self._trainable[p]]

    def set_trainable(self, prefix, trainable):
        for p in self._params:
            if p == prefix or p.startswith(prefix + "."):
                self._trainable[p] = trainable
                self._params[p].requires_grad = trainable

    def count(self):
        """Total number of scalar parameters."""
        return sum(t.size for _, t in self.items())

    def zero_grad(self):
        for _, t in self.items():
            t.grad = None

    def load_values(self, values, prefix=""):
        """Overwrite parameter buffers from a {path: ndarray} mapping."""
        for path, arr in values.items():
            full = prefix + path
            cur = self._params[full]
            if cur.shape != arr.shape:
                raise DimensionError(f"{full}: stored shape {arr.shape} vs expected {cur.shape}")
            cur.data = np.asarray(arr, dtype=cur.data.dtype)


def init_params(layout, seed):
    """Materialize a ParamStore from a {path: ParamSpec} layout.

    Initialization is deterministic in `seed` and in the sorted path order,
    so identical (layout, seed) pairs produce bit-identical stores.
    """
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for path in sorted(layout):
        spec = layout[path]
        if spec.fan_in is not None:
            bound = 1.0 / np.sqrt(spec.fan_in)
            data = rng.uniform(-bound, bound, size=spec.shape)
        elif spec.const is not None:
            data = np.full(spec.shape, spec.const)
        else:
            data = np.zeros(spec.shape)
        store.add(path, Tensor(data, requires_grad=True))
    return store


def _batched(x, rank, what):
    """Normalize to a leading batch axis; returns (tensor, had_batch)."""
    if x.ndim == rank:
        return x.reshape((1,) + x.shape), False
    if x.ndim == rank + 1:
        return x, True
    raise DimensionError(f"{what}: expected rank {rank} or {rank + 1}, got shape {x.shape}")


def _debatch(x, had_batch):
    return x if had_batch else x.reshape(x.shape[1:])


# -- convolution ---------------------------------------------------------------


def conv2d(x, kernel, padding="same", bias=None):
    """2-D cross-correlation. x: (h,w,cin) or (b,h,w,cin); kernel:
    (kh,kw,cin,cout). `same` zero-pads (odd kernel sides required); `valid`
    does not pad."""
    x, had_batch = _batched(x, 3, "conv2d")
    kh, kw, cin, cout = kernel.shape
    if x.shape[-1] != cin:
        raise DimensionError(f"conv2d: input channels {x.shape[-1]} vs kernel {kernel.shape}")
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise DimensionError(f"conv2d: same-padding needs odd kernel sides, got {(kh, kw)}")
        ph, pw = kh // 2, kw // 2
    elif padding == "valid":
        ph = pw = 0
    else:
        raise ContractError(f"conv2d: unknown padding {padding!r}")

    xp_shape = (x.shape[0], x.shape[1] + 2 * ph, x.shape[2] + 2 * pw, cin)
    if ph or pw:
        xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    else:
        xp = x.data
    b, hp, wp, _ = xp_shape
    oh, ow = hp - kh + 1, wp - kw + 1
    cols = _im2col(xp, kh, kw)                      # (b*oh*ow, kh*kw*cin)
    w2 = kernel.data.reshape(kh * kw * cin, cout)
    out = (cols @ w2).reshape(b, oh, ow, cout)

    def bwd(g, cols=cols, xp_shape=xp_shape, kshape=kernel.shape, w2=w2,
            ph=ph, pw=pw):
        kh, kw, cin, cout = kshape
        b, hp, wp, _ = xp_shape
        oh, ow = hp - kh + 1, wp - kw + 1
        g2 = g.reshape(b * oh * ow, cout)
        dk = (cols.T @ g2).reshape(kshape)
        dcols = (g2 @ w2.T).reshape(b, oh, ow, kh, kw, cin)
        dxp = np.zeros(xp_shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i:i + oh, j:j + ow, :] += dcols[:, :, :, i, j, :]
        dx = dxp[:, ph:hp - ph, pw:wp - pw, :] if (ph or pw) else dxp
        return np.ascontiguousarray(dx), dk

    out_t = Tensor._from_op(out, (x, kernel), bwd, "conv2d")
    if bias is not None:
        if bias.shape != (cout,):
            raise DimensionError(f"conv2d: bias shape {bias.shape} vs cout {cout}")
        out_t = out_t + bias.broadcast_to(out_t.shape)
    return _debatch(out_t, had_batch)


def _im2col(xp, kh, kw):
    b, hp, wp, cin = xp.shape
    oh, ow = hp - kh + 1, wp - kw + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    # (b, oh, ow, cin, kh, kw) -> (b*oh*ow, kh*kw*cin)
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(
        b * oh * ow, kh * kw * cin)


# -- affine / normalization ------------------------------------------------------


def linear(x, w, b=None):
    """Affine map over the last axis: y = x @ w (+ b)."""
    cin, cout = w.shape
    if x.shape[-1] != cin:
        raise DimensionError(f"linear: input last dim {x.shape} vs weight {w.shape}")
    lead = x.shape[:-1]
    n = int(np.prod(lead)) if lead else 1
    y = (x.reshape(n, cin) @ w).reshape(lead + (cout,))
    if b is not None:
        if b.shape != (cout,):
            raise DimensionError(f"linear: bias shape {b.shape} vs cout {cout}")
        y = y + b.broadcast_to(y.shape)
    return y


def layer_norm(x, gain, bias, eps=1e-5):
    """Standardize the last axis (mean 0, variance 1 up to eps), then apply
    a learned per-channel affine."""
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs channels {c}")
    mu = x.mean(axis=-1, keepdims=True).broadcast_to(x.shape)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / (var + eps).sqrt()
    xn = xc * inv.broadcast_to(x.shape)
    return xn * gain.broadcast_to(x.shape) + bias.broadcast_to(x.shape)


# -- pixel shuffle ------------------------------------------------------------------


def pixel_shuffle(x, r):
    """Rearrange (h, w, r*r*c) -> (r*h, r*w, c):
    out(y, x, ch) = in(y//r, x//r, ch*r*r + r*(y%r) + (x%r))."""
    x, had_batch = _batched(x, 3, "pixel_shuffle")
    b, h, w, cr2 = x.shape
    if cr2 % (r * r) != 0:
        raise DimensionError(f"pixel_shuffle: channels {cr2} not divisible by r^2={r * r}")
    c = cr2 // (r * r)
    out = (x.reshape(b, h, w, c, r, r)
            .permute(0, 1, 4, 2, 5, 3)
            .reshape(b, h * r, w * r, c))
    return _debatch(out, had_batch)


def pixel_unshuffle(x, r):
    """Exact inverse of pixel_shuffle."""
    x, had_batch = _batched(x, 3, "pixel_unshuffle")
    b, hr, wr, c = x.shape
    if hr % r != 0 or wr % r != 0:
        raise DimensionError(f"pixel_unshuffle: spatial dims {(hr, wr)} not divisible by r={r}")
    h, w = hr // r, wr // r
    out = (x.reshape(b, h, r, w, r, c)
            .permute(0, 1, 3, 5, 2, 4)
            .reshape(b, h, w, c * r * r))
    return _debatch(out, had_batch)


def avg_pool2(x):
    """2x2 non-overlapping average pooling."""
    x, had_batch = _batched(x, 3, "avg_pool2")
    b, h, w, c = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avg_pool2: spatial dims {(h, w)} must be even")
    out = (x.reshape(b, h // 2, 2, w // 2, 2, c).mean(axis=2).mean(axis=3))
    return _debatch(out, had_batch)


# -- gated recurrent scan ---------------------------------------------------------

GATE_PARAM_NAMES = ("wz", "uz", "bz", "wh", "uh", "bh")


def gated_cell_layout(c):
    """Layout for one minimal gated cell (update gate + candidate)."""
    return {
        "wz": ParamSpec((c, c), c), "uz": ParamSpec((c, c), c), "bz": ParamSpec((c,)),
        "wh": ParamSpec((c, c), c), "uh": ParamSpec((c, c), c), "bh": ParamSpec((c,)),
    }


def gated_scan(x, wz, uz, bz, wh, uh, bh):
    """Left-to-right gated recurrence over the middle axis of x: (B, T, C).

    z_t = sigmoid(x_t Wz + h_{t-1} Uz + bz)
    c_t = tanh   (x_t Wh + h_{t-1} Uh + bh)
    h_t = (1 - z_t) * h_{t-1} + z_t * c_t,  h_0 = 0

    Returns the hidden-state sequence (B, T, C). Implemented as a single
    graph node: the whole backward-through-time pass is hand-derived, which
    keeps per-step graph overhead out of the training loop.
    """
    if x.ndim != 3:
        raise DimensionError(f"gated_scan: expected (B,T,C), got {x.shape}")
    bsz, t_len, c = x.shape
    for name, p in zip(GATE_PARAM_NAMES, (wz, uz, bz, wh, uh, bh)):
        want = (c,) if name.startswith("b") else (c, c)
        if p.shape != want:
            raise DimensionError(f"gated_scan: {name} shape {p.shape} vs expected {want}")

    xd = x.data
    xz = xd @ wz.data + bz.data
    xh = xd @ wh.data + bh.data
    hs = np.empty_like(xd)
    zs = np.empty_like(xd)
    cs = np.empty_like(xd)
    h = np.zeros((bsz, c), dtype=xd.dtype)
    uzd, uhd = uz.data, uh.data
    for t in range(t_len):
        z = _sigmoid(xz[:, t] + h @ uzd)
        cand = np.tanh(xh[:, t] + h @ uhd)
        zs[:, t] = z
        cs[:, t] = cand
        hs[:, t] = h = (1.0 - z) * h + z * cand

    def bwd(g, xd=xd, hs=hs, zs=zs, cs=cs, wzd=wz.data, uzd=uzd,
            whd=wh.data, uhd=uhd):
        bsz, t_len, c = xd.shape
        daz = np.empty_like(xd)
        dac = np.empty_like(xd)
        duz = np.zeros_like(uzd)
        duh = np.zeros_like(uhd)
        dh = np.zeros((bsz, c), dtype=xd.dtype)
        zero = np.zeros((bsz, c), dtype=xd.dtype)
        for t in range(t_len - 1, -1, -1):
            dh = dh + g[:, t]
            z, cand = zs[:, t], cs[:, t]
            hp = hs[:, t - 1] if t > 0 else zero
            da_c = dh * z * (1.0 - cand * cand)
            da_z = dh * (cand - hp) * z * (1.0 - z)
            daz[:, t] = da_z
            dac[:, t] = da_c
            duz += hp.T @ da_z
            duh += hp.T @ da_c
            dh = dh * (1.0 - z) + da_z @ uzd.T + da_c @ uhd.T
        x2 = xd.reshape(bsz * t_len, c)
        daz2 = daz.reshape(bsz * t_len, c)
        dac2 = dac.reshape(bsz * t_len, c)
        dx = (daz2 @ wzd.T + dac2 @ whd.T).reshape(xd.shape)
        return (dx, x2.T @ daz2, duz, daz2.sum(axis=0),
                x2.T @ dac2, duh, dac2.sum(axis=0))

    return Tensor._from_op(hs, (x, wz, uz, bz, wh, uh, bh), bwd, "gated_scan")


def _cell(store, prefix):
    return tuple(store[f"{prefix}.{n}"] for n in GATE_PARAM_NAMES)


def row_scan_layout(c):
    """Layout for a bidirectional row scan: one shared cell + output projection."""
    layout = {f"cell.{k}": v for k, v in gated_cell_layout(c).items()}
    layout["proj.w"] = ParamSpec((c, c), c)
    layout["proj.b"] = ParamSpec((c,))
    return layout


def bidirectional_row_scan(x, store, prefix):
    """Per-row gated recurrence over the width axis, run left-to-right and
    right-to-left with one shared cell; the two passes are summed and
    projected back to c channels."""
    x, had_batch = _batched(x, 3, "bidirectional_row_scan")
    b, h, w, c = x.shape
    cell = _cell(store, f"{prefix}.cell")
    seq = x.reshape(b * h, w, c)
    fwd = gated_scan(seq, *cell)
    rev = gated_scan(seq.flip(1), *cell).flip(1)
    out = linear(fwd + rev, store[f"{prefix}.proj.w"], store[f"{prefix}.proj.b"])
    return _debatch(out.reshape(b, h, w, c), had_batch)


def bidirectional_column_scan(x, store, prefix):
    """Same recurrence over the height axis (rows and columns swapped)."""
    x, had_batch = _batched(x, 3, "bidirectional_column_scan")
    xt = x.permute(0, 2, 1, 3)
    out = bidirectional_row_scan(xt, store, prefix).permute(0, 2, 1, 3)
    return _debatch(out, had_batch)


# -- sequential-recurrent block ------------------------------------------------------


def srb_layout(c):
    layout = {
        "conv_in.w": ParamSpec((3, 3, c, c), 9 * c), "conv_in.b": ParamSpec((c,)),
        "conv_out.w": ParamSpec((3, 3, c, c), 9 * c), "conv_out.b": ParamSpec((c,)),
    }
    for name in ("wscan", "hscan"):
        layout.update({f"{name}.{k}": v for k, v in row_scan_layout(c).items()})
    return layout


def srb_forward(x, store, prefix):
    """Sequential-recurrent block: 3x3 conv, bidirectional scans over width
    then height, 3x3 conv, with a residual connection around the whole
    block."""
    y = conv2d(x, store[f"{prefix}.conv_in.w"], "same", store[f"{prefix}.conv_in.b"])
    y = bidirectional_row_scan(y, store, f"{prefix}.wscan")
    y = bidirectional_column_scan(y, store, f"{prefix}.hscan")
    y = conv2d(y, store[f"{prefix}.conv_out.w"], "same", store[f"{prefix}.conv_out.b"])
    return x + y
