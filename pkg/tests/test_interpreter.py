import numpy as np
import numpy.testing as npt
import pytest

from oracles import mat, scalar_ffn, scalar_multi_head
from textsr import attention as att
from textsr import interpreter as tpi
from textsr import nn
from textsr.tensor import ContractError, Tensor, check_gradient


def _uniform_prior(l):
    return tpi.TextPrior(Tensor(np.full((l, 37), 1.0 / 37)))


def _random_prior(rng, l):
    logits = rng.normal(size=(l, 37))
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return tpi.TextPrior(Tensor(e / e.sum(axis=-1, keepdims=True)))


def _setup(h=4, w=8, c=8, n=2, seed=0):
    cfg = att.AttentionConfig(heads=n, channels=c, key_dim=c)
    store = nn.init_params(tpi.interpreter_layout(cfg, h, w, ffn_hidden=c), seed)
    return cfg, store


# -- TextPrior contract ---------------------------------------------------------


def test_text_prior_rejects_unnormalized():
    with pytest.raises(ContractError, match="not normalized"):
        tpi.TextPrior(Tensor(np.full((2, 37), 0.5)))


def test_text_prior_rejects_negative():
    p = np.full((1, 37), 1.0 / 37)
    p[0, 0] = -0.1
    p[0, 1] += 0.1 + 1.0 / 37
    with pytest.raises(ContractError, match="negative"):
        tpi.TextPrior(Tensor(p))


def test_text_prior_wrong_alphabet():
    with pytest.raises(ContractError, match="37"):
        tpi.TextPrior(Tensor(np.full((2, 10), 0.1)))


# -- encoder ------------------------------------------------------------------------


def test_encode_prior_default_shape():
    cfg = att.AttentionConfig(heads=4, channels=64, key_dim=64)
    store = nn.init_params(tpi.interpreter_layout(cfg, 16, 64, ffn_hidden=64), 1)
    out = tpi.encode_prior(_uniform_prior(16), cfg, store)
    assert out.shape == (16, 64)


def test_encode_prior_position_codes_break_row_swap():
    rng = np.random.default_rng(2)
    cfg, store = _setup(seed=3)
    prior = _random_prior(rng, 6)
    perm = np.array([3, 0, 5, 1, 4, 2])
    enc = tpi.encode_prior(prior, cfg, store).data
    enc_p = tpi.encode_prior(tpi.TextPrior(Tensor(prior.probs.data[perm])), cfg, store).data
    # un-permuting the permuted encoding does not recover the original:
    # the fixed positional code is tied to the row index
    assert not np.allclose(enc_p[np.argsort(perm)], enc, atol=1e-6)


def test_encode_prior_gradient_full_encoder():
    # differentiate through the softmax that produces the prior, as the
    # recognizer does; perturbing raw probabilities would break their
    # normalization contract
    from textsr.tensor import softmax_lastdim

    rng = np.random.default_rng(4)
    cfg, store = _setup(c=4, n=2, seed=5)
    logits = Tensor(rng.normal(size=(3, 37)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 4)))

    def loss(t):
        prior = tpi.TextPrior(softmax_lastdim(t))
        return (tpi.encode_prior(prior, cfg, store) * w).sum()

    assert check_gradient(loss, logits) < 1e-4


# -- decoder -------------------------------------------------------------------------


def test_decode_default_shape():
    rng = np.random.default_rng(6)
    cfg = att.AttentionConfig(heads=4, channels=64, key_dim=64)
    store = nn.init_params(tpi.interpreter_layout(cfg, 16, 64, ffn_hidden=64), 7)
    f_e = Tensor(rng.normal(size=(16, 64)))
    f_i = Tensor(rng.normal(size=(16, 64, 64)))
    tp_map, weights = tpi.decode_to_tp_map(f_e, f_i, cfg, store)
    assert tp_map.shape == (16, 64, 64)
    assert weights.probs.shape == (4, 16 * 64, 16)
    npt.assert_allclose(weights.row_sums(), 1.0, atol=1e-6)


def test_decode_single_key_spatially_constant_with_rpe_zeroed():
    rng = np.random.default_rng(8)
    cfg, store = _setup(h=3, w=4, c=4, n=1, seed=9)
    store["rpe.pos"].data[:] = 0.0
    store["rpe.cell.bz"].data[:] = 0.0
    store["rpe.cell.bh"].data[:] = 0.0
    f_e = Tensor(rng.normal(size=(1, 4)))
    f_i = Tensor(np.tile(rng.normal(size=(1, 1, 4)), (3, 4, 1)))
    tp_map, _ = tpi.decode_to_tp_map(f_e, f_i, cfg, store)
    flat = tp_map.data.reshape(-1, 4)
    npt.assert_allclose(flat, np.tile(flat[0], (flat.shape[0], 1)), atol=1e-9)


def test_decode_matches_scalar_oracle_chain():
    # 2x2 feature grid, l=2, c=2, n=1: brute-force the full decoder layer
    rng = np.random.default_rng(10)
    cfg, store = _setup(h=2, w=2, c=2, n=1, seed=11)
    f_e = rng.normal(size=(2, 2))
    f_i = rng.normal(size=(2, 2, 2))
    tp_map, _ = tpi.decode_to_tp_map(Tensor(f_e), Tensor(f_i), cfg, store)

    rpe = att.recurrent_positional_encoding(2, 2, 2, store, "rpe").data
    fq = (f_i + rpe).reshape(4, 2)
    sub = scalar_multi_head(
        f_e.tolist(), fq.tolist(),
        store["dec.l0.mca.wq"].data.tolist(), store["dec.l0.mca.wk"].data.tolist(),
        store["dec.l0.mca.wv"].data.tolist(), store["dec.l0.mca.wo"].data.tolist(), 1)

    def ln(rows, prefix):
        g, b = store[f"{prefix}.g"].data, store[f"{prefix}.b"].data
        out = []
        for row in rows:
            mu = sum(row) / len(row)
            var = sum((v - mu) ** 2 for v in row) / len(row)
            inv = 1.0 / np.sqrt(var + 1e-5)
            out.append([(v - mu) * inv * g[j] + b[j] for j, v in enumerate(row)])
        return out

    x = ln([[a + b for a, b in zip(r1, r2)] for r1, r2 in zip(fq.tolist(), sub)], "dec.l0.ln1")
    f = scalar_ffn(x, store["dec.l0.ffn.w1"].data.tolist(), store["dec.l0.ffn.b1"].data.tolist(),
                   store["dec.l0.ffn.w2"].data.tolist(), store["dec.l0.ffn.b2"].data.tolist())
    want = ln([[a + b for a, b in zip(r1, r2)] for r1, r2 in zip(x, f)], "dec.l0.ln2")
    npt.assert_allclose(tp_map.data.reshape(4, 2), want, atol=1e-10)


def test_interpreter_end_to_end_gradient_mini():
    # miniature config from the acceptance gate: h=4, w=8, c=8, l=4, n=2
    rng = np.random.default_rng(12)
    cfg, store = _setup(h=4, w=8, c=8, n=2, seed=13)
    prior = _random_prior(rng, 4)
    f_i = Tensor(rng.normal(size=(4, 8, 8)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 8, 8)))

    def loss(t):
        f_e = tpi.encode_prior(prior, cfg, store)
        tp_map, _ = tpi.decode_to_tp_map(f_e, t, cfg, store)
        return (tp_map * w).sum()

    assert check_gradient(loss, f_i) < 1e-4
    pos = store["rpe.pos"]
    assert check_gradient(lambda t: loss(f_i), pos) < 1e-4


# -- heatmap extraction ---------------------------------------------------------------


def test_heatmap_uniform_attention_all_zero():
    w = att.AttentionWeights(Tensor(np.full((2, 6, 4), 0.25)))
    out = tpi.attention_heatmap_extract(w, 1, 2, 3)
    npt.assert_array_equal(out.data, np.zeros((2, 3)))


def test_heatmap_one_hot_single_cell():
    probs = np.zeros((1, 6, 3))
    probs[:, :, 2] = 1.0  # every query attends to char 2
    probs[0, 4, 2] = 0.0
    probs[0, 4, 0] = 1.0  # except query 4, which ignores it
    w = att.AttentionWeights(Tensor(probs))
    out = tpi.attention_heatmap_extract(w, 2, 2, 3)
    want = np.ones((2, 3))
    want[1, 1] = 0.0  # query 4 -> row 1, col 1
    npt.assert_array_equal(out.data, want)


def test_heatmap_bounds_error():
    w = att.AttentionWeights(Tensor(np.full((1, 4, 2), 0.5)))
    with pytest.raises(IndexError, match="out of range"):
        tpi.attention_heatmap_extract(w, 2, 2, 2)


def test_heatmap_range_normalized():
    rng = np.random.default_rng(14)
    probs = rng.uniform(size=(3, 8, 5))
    probs /= probs.sum(axis=-1, keepdims=True)
    out = tpi.attention_heatmap_extract(att.AttentionWeights(Tensor(probs)), 0, 2, 4)
    assert out.data.min() == 0.0 and out.data.max() == 1.0
