import numpy as np
import pytest

from deform3d import checks
from deform3d import detrans as DT
from deform3d import tensor as T
from deform3d.bridge import LevelLayout, TokenSequence, reference_points
from deform3d.errors import ConfigError, DimensionError
from deform3d.msdmsa import msdmsa_forward

LAY = LevelLayout(((2, 3, 3), (1, 2, 2)))


def _layer(rng, c=12, f=24, h=2, l=2, k=2):
    return checks._random_layer(rng, c, f, h, l, k)


def test_ffn_zero_weights_give_second_bias(rng):
    lp = _layer(rng)
    lp.w1[...] = 0
    lp.w2[...] = 0
    y, _ = DT.ffn(rng.normal(size=(5, 12)), lp)
    assert np.array_equal(y, np.broadcast_to(lp.b2, (5, 12)))


def test_ffn_identity_config_is_relu(rng):
    lp = DT.DeTransLayerParams.init(12, 12, 2, 1, 1, rng)
    lp.w1[...] = np.eye(12)
    lp.w2[...] = np.eye(12)
    x = rng.normal(size=(5, 12))
    assert np.array_equal(DT.ffn(x, lp)[0], np.maximum(x, 0))


@pytest.mark.parametrize("seed", range(5))
def test_ffn_gradcheck(seed):
    rep = checks.check_ffn(seed)
    assert rep.passed, rep.table()


def test_ffn_dropout(rng):
    lp = _layer(rng)
    x = rng.normal(size=(50, 12))
    with pytest.raises(ValueError):
        DT.ffn(x, lp, dropout=0.5)
    a, _ = DT.ffn(x, lp, 0.5, np.random.default_rng(1))
    b, _ = DT.ffn(x, lp, 0.5, np.random.default_rng(1))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, DT.ffn(x, lp)[0])


def test_layer_with_zeroed_sublayers_is_double_layer_norm(rng):
    lp = DT.DeTransLayerParams.init(12, 24, 2, 2, 2, rng)
    lp.attn.w_out[...] = 0
    lp.w2[...] = 0
    x = rng.normal(2, 3, size=(LAY.total, 12))
    out, _ = DT.detrans_layer(TokenSequence(x, LAY), reference_points(LAY), lp)
    ones, zeros = np.ones(12), np.zeros(12)
    ln = T.layer_norm(x, ones, zeros)[0]
    assert np.array_equal(out.tokens, T.layer_norm(ln, ones, zeros)[0])
    assert np.allclose(out.tokens, ln, rtol=0, atol=1e-4)


def test_single_voxel_layer_matches_hand_chain(rng):
    lay = LevelLayout(((1, 1, 1),))
    lp = _layer(rng, l=1)
    x = rng.normal(size=(1, 12))
    out, _ = DT.detrans_layer(TokenSequence(x, lay), reference_points(lay), lp)
    a = lp.attn
    attn = (x @ a.w_value + a.b_value) @ a.w_out + a.b_out
    y = T.layer_norm(x + attn, lp.ln1_gain, lp.ln1_bias)[0]
    f = np.maximum(y @ lp.w1 + lp.b1, 0) @ lp.w2 + lp.b2
    want = T.layer_norm(y + f, lp.ln2_gain, lp.ln2_bias)[0]
    assert np.allclose(out.tokens, want, rtol=0, atol=1e-13)


def test_layer_composition_matches_msdmsa(rng):
    lp = _layer(rng)
    x = rng.normal(size=(LAY.total, 12))
    refs = reference_points(LAY)
    a, _ = msdmsa_forward(TokenSequence(x, LAY), refs, lp.attn)
    out, _ = DT.detrans_layer(TokenSequence(x, LAY), refs, lp)
    y = T.layer_norm(x + a.tokens, lp.ln1_gain, lp.ln1_bias)[0]
    assert np.array_equal(out.tokens, T.layer_norm(y + DT.ffn(y, lp)[0], lp.ln2_gain, lp.ln2_bias)[0])


@pytest.mark.parametrize("seed", range(5))
def test_layer_gradcheck(seed):
    rep = checks.check_detrans(seed)
    assert rep.passed, rep.table()


def test_encoder_with_no_layers_is_identity(rng):
    seq = TokenSequence(rng.normal(size=(LAY.total, 12)), LAY)
    out, caches, outs = DT.encoder_forward(seq, reference_points(LAY), [])
    assert out is seq and caches == [] and outs == []


def test_encoder_two_layers_is_composition(rng):
    layers = [_layer(rng), _layer(rng)]
    seq = TokenSequence(rng.normal(size=(LAY.total, 12)), LAY)
    refs = reference_points(LAY)
    out, _, outs = DT.encoder_forward(seq, refs, layers)
    once = DT.detrans_layer(seq, refs, layers[0])[0]
    twice = DT.detrans_layer(once, refs, layers[1])[0]
    assert np.array_equal(out.tokens, twice.tokens)
    assert np.array_equal(outs[0].tokens, once.tokens)


@pytest.mark.parametrize("seed", range(5))
def test_stacked_gradcheck(seed):
    rep = checks.check_detrans(seed, LevelLayout(((2, 2, 2), (1, 2, 2))), n_layers=2)
    assert rep.passed, rep.table()


def test_mixed_layer_shapes_rejected(rng):
    with pytest.raises(ConfigError):
        DT.check_encoder([_layer(rng), _layer(rng, f=12)])


def test_ffn_width_checked(rng):
    with pytest.raises(DimensionError):
        DT.ffn(np.zeros((2, 6)), _layer(rng))


def test_arrays_roundtrip(rng):
    lp = _layer(rng)
    back = DT.DeTransLayerParams.from_arrays(lp.arrays(), 2, 2, 2)
    assert all(np.array_equal(v, back.arrays()[k]) for k, v in lp.arrays().items())
