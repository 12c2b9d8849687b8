import math

import numpy as np
import pytest

import oracles
from framefuse import context, gates
from framefuse import numkernel as nk
from framefuse.context import LstmParams, TightParams, TransformerParams
from framefuse.gates import EXPANSION, SIGMOID, SOFTMAX, SQUEEZE, FrameFeatures, GateParadigm


def frames(rng, n, c, valid=None):
    v = rng.normal(size=(n, c))
    mask = np.ones(n, dtype=bool)
    if valid is not None:
        mask[valid:] = False
        v[valid:] = 0
    return FrameFeatures(v, mask)


def lstm_oracle(v, mask, p):
    x = v.tolist()
    for layer in range(p.layers):
        t = oracles.layer_tensors(p.tensors, layer)
        h, c = [0.0] * p.width, [0.0] * p.width
        out = []
        for step, valid in zip(x, mask):
            if not valid:
                out.append([0.0] * p.width)
                continue
            h, c = oracles.lstm_step(step, h, c, t["w_ih"], t["w_hh"], t["b"])
            out.append(h)
        x = out
    return np.array(x)


def encoder_oracle(tokens, valid, p):
    x = tokens
    for layer in range(p.layers):
        x = oracles.encoder_layer(x, valid, oracles.layer_tensors(p.tensors, layer), p.heads)
    return x


def transformer_oracle(v, mask, p):
    tokens = (v + p.tensors["pos"][: len(v)]).tolist()
    y = np.array(encoder_oracle(tokens, mask.tolist(), p)) * mask[:, None]
    return y + v if p.residual else y


def tight_oracle(text, v, mask, p, excite=None):
    if excite is not None:
        v = np.array(oracles.excite(v.tolist(), excite, mask.tolist()))
    seg, pos = p.tensors["seg"], p.encoder.tensors["pos"]
    tokens = [text + seg[0] + pos[0]] + [v[i] + seg[1] + pos[i + 1] for i in range(len(v))]
    out = encoder_oracle([t.tolist() for t in tokens], [True] + mask.tolist(), p.encoder)
    hidden = [max(0.0, y) for y in oracles.dense(out[0], p.tensors["head1.w"], p.tensors["head1.b"])]
    return oracles.dense(hidden, p.tensors["head2.w"], p.tensors["head2.b"])[0]


def randomize(tensors, rng, scale=0.3):
    """Replace every tensor (including norms, biases and positions) with random values."""
    return {k: rng.normal(scale=scale, size=np.shape(v)) + (1.0 if k.endswith(".g") else 0.0) for k, v in tensors.items()}


# ----------------------------------------------------------------------- LSTM


def test_lstm_zero_params_give_zero_output():
    v = frames(np.random.default_rng(0), 12, 16)
    out = context.lstm_encode(v, LstmParams.init(16, mode="zero"))
    assert np.array_equal(out.value, np.zeros((12, 16)))


def test_lstm_single_frame_matches_cell_oracle():
    rng = np.random.default_rng(1)
    p = LstmParams.init(6, rng=rng)
    x = rng.normal(size=6)
    t = oracles.layer_tensors(p.tensors, 0)
    h, _ = oracles.lstm_step(x.tolist(), [0.0] * 6, [0.0] * 6, t["w_ih"], t["w_hh"], t["b"])
    out = context.lstm_encode(FrameFeatures(x[None]), p).value
    assert np.allclose(out[0], h, atol=1e-12)


def test_lstm_shape_and_forget_bias():
    p = LstmParams.init(16, rng=2)
    assert np.array_equal(p.tensors["l0.b"][16:32], np.ones(16))
    assert p.tensors["l0.w_ih"].shape == (64, 16)
    v = frames(np.random.default_rng(2), 12, 16)
    assert context.lstm_encode(v, p).value.shape == (12, 16)


@pytest.mark.parametrize("layers", [1, 2])
def test_lstm_sequence_matches_loop_oracle(layers):
    rng = np.random.default_rng(3)
    p = LstmParams.init(5, layers, rng=rng)
    v = frames(rng, 7, 5, valid=4)
    out = context.lstm_encode(v, p).value
    assert np.allclose(out, lstm_oracle(v.value, v.mask, p), atol=1e-12)


def test_lstm_width_mismatch():
    with pytest.raises(nk.DimensionError):
        context.lstm_encode(FrameFeatures(np.ones((3, 4))), LstmParams.init(5))


# ---------------------------------------------------------------- Transformer


def test_transformer_zero_projections_without_residual_add_positions():
    rng = np.random.default_rng(4)
    p = TransformerParams.init(8, 2, 2, 12, residual=False, mode="zero")
    p.tensors["pos"] = rng.normal(size=(12, 8))
    v = frames(rng, 12, 8, valid=9)
    out = context.transformer_encode(v, p).value
    assert np.allclose(out, (v.value + p.tensors["pos"]) * v.mask[:, None], atol=1e-15)


def test_transformer_zero_init_with_residual_doubles_input():
    v = frames(np.random.default_rng(5), 6, 8, valid=4)
    out = context.transformer_encode(v, TransformerParams.init(8, 1, 2, 6, mode="zero")).value
    assert np.allclose(out, 2 * v.value, atol=1e-15)


def test_single_valid_frame_receives_all_attention():
    rng = np.random.default_rng(6)
    p = TransformerParams.init(8, 2, 4, 6, rng=rng)
    v = frames(rng, 6, 8, valid=1)
    maps = []
    context.transformer_encode(v, p, attention=maps)
    assert len(maps) == 2
    for att in maps:
        assert np.array_equal(att[..., 0], np.ones(att.shape[:-1]))
        assert np.all(att[..., 1:] == 0)


@pytest.mark.parametrize("n,c,layers,heads", [(2, 4, 1, 1), (5, 8, 2, 2)])
def test_transformer_matches_loop_oracle(n, c, layers, heads):
    rng = np.random.default_rng(n * 10 + c)
    p = TransformerParams.init(c, layers, heads, n, rng=rng)
    p.tensors = randomize(p.tensors, rng)
    v = frames(rng, n, c, valid=n - 1)
    for residual in (True, False):
        p.residual = residual
        out = context.transformer_encode(v, p).value
        assert np.allclose(out, transformer_oracle(v.value, v.mask, p), atol=1e-12)


def test_transformer_attention_rows_are_distributions_over_valid_keys():
    rng = np.random.default_rng(7)
    p = TransformerParams.init(16, 1, 8, 12, rng=rng)
    v = frames(rng, 12, 16, valid=9)
    maps = []
    context.transformer_encode(v, p, attention=maps)
    att = maps[0]
    assert att.shape == (1, 8, 12, 12)
    assert np.allclose(att.sum(-1), 1, atol=1e-12)
    assert np.all(att[..., 9:] == 0)


def test_transformer_config_errors():
    with pytest.raises(gates.ConfigurationError):
        TransformerParams.init(10, heads=4)
    with pytest.raises(nk.DimensionError):
        context.transformer_encode(FrameFeatures(np.ones((13, 8))), TransformerParams.init(8, 1, 2, 12))


# --------------------------------------------------------- sequential heads


def test_sequential_aggregate_compositions():
    rng = np.random.default_rng(8)
    v = frames(rng, 12, 16, valid=10)
    enc = TransformerParams.init(16, 1, 4, 12, rng=rng)
    g_e = gates.init_gate(12, GateParadigm(SQUEEZE, 4), SIGMOID, "uniform", rng)
    g_a = gates.init_gate(12, GateParadigm(EXPANSION, 4), SOFTMAX, "uniform", rng)
    vt = context.transformer_encode(v, enc)
    cases = {
        "meanP": gates.mean_pool(vt),
        "aggregation": gates.aggregation(vt, g_a),
        "excitation+meanP": gates.mean_pool(gates.excitation(vt, g_e)),
        "excitation+aggregation": gates.excitation_and_aggregation(vt, g_e, g_a),
    }
    for head, expected in cases.items():
        out = context.sequential_aggregate(v, enc, head, g_e, g_a)
        assert np.allclose(out.value, expected.value, atol=1e-14), head


def test_sequential_aggregate_with_zero_lstm_is_zero():
    v = frames(np.random.default_rng(9), 12, 8)
    out = context.sequential_aggregate(v, LstmParams.init(8, mode="zero"))
    assert np.array_equal(out.value, np.zeros(8))


def test_sequential_aggregate_errors():
    v = frames(np.random.default_rng(10), 4, 8)
    with pytest.raises(gates.ConfigurationError):
        context.sequential_aggregate(v, None, "attention")
    with pytest.raises(gates.ConfigurationError):
        context.sequential_aggregate(v, None, "aggregation")
    with pytest.raises(gates.ConfigurationError):
        context.sequential_aggregate(v, "gru")


# --------------------------------------------------------------- tight scorer


def test_tight_zero_head_scores_zero():
    rng = np.random.default_rng(11)
    p = TightParams.init(8, 12, 1, 2, rng=rng, head_mode="zero")
    v = frames(rng, 12, 8, valid=5)
    assert context.tight_score(rng.normal(size=8), v, p).value == 0.0


def test_tight_zero_excitation_halves_frame_tokens():
    rng = np.random.default_rng(12)
    p = TightParams.init(8, 6, 1, 2, rng=rng)
    p.tensors = randomize(p.tensors, rng)
    v = frames(rng, 6, 8, valid=4)
    text = rng.normal(size=8)
    g = gates.init_gate(6, GateParadigm(SQUEEZE, 4), SIGMOID)
    halved = FrameFeatures(0.5 * v.value, v.mask)
    assert context.tight_score(text, v, p, g).value == pytest.approx(context.tight_score(text, halved, p).value, abs=1e-14)


@pytest.mark.parametrize("excite", [False, True])
def test_tight_matches_loop_oracle(excite):
    rng = np.random.default_rng(13)
    p = TightParams.init(4, 3, 1, 2, rng=rng)
    p.tensors = randomize(p.tensors, rng)
    p.encoder.tensors = randomize(p.encoder.tensors, rng)
    g = gates.init_gate(3, GateParadigm(SQUEEZE, 2), SIGMOID, "uniform", rng) if excite else None
    v = frames(rng, 3, 4, valid=2)
    text = rng.normal(size=4)
    out = float(context.tight_score(text, v, p, g).value)
    assert out == pytest.approx(tight_oracle(text, v.value, v.mask, p, g), abs=1e-12)


def test_tight_head_width_rounds_up():
    p = TightParams.init(5, 2, 1, 1)
    assert p.tensors["head1.w"].shape == (math.ceil(5 / 2), 5)
    assert p.encoder.max_len == 3 and not p.encoder.residual


def test_tight_similarity_matches_pairwise_scores():
    rng = np.random.default_rng(14)
    p = TightParams.init(8, 4, 1, 2, rng=rng)
    texts = rng.normal(size=(3, 8))
    clips = [frames(rng, 4, 8, valid=k) for k in (2, 4)]
    batch = FrameFeatures(np.stack([c.value for c in clips]), np.stack([c.mask for c in clips]))
    sim = context.tight_similarity(texts, batch, p).value
    assert sim.shape == (3, 2)
    for i in range(3):
        for j in range(2):
            assert sim[i, j] == pytest.approx(float(context.tight_score(texts[i], clips[j], p).value), abs=1e-12)


def test_tight_dimension_errors():
    p = TightParams.init(8, 4, 1, 2)
    with pytest.raises(nk.DimensionError):
        context.tight_score(np.zeros(8), FrameFeatures(np.ones((5, 8))), p)
    with pytest.raises(nk.DimensionError):
        context.tight_score(np.zeros(6), FrameFeatures(np.ones((4, 8))), p)


# ------------------------------------------------------------------ gradients


def _grad_case(build, params, probe_shape, rng):
    probe = rng.normal(size=probe_shape)
    rep = nk.grad_check(lambda P: nk.sum(build(P) * probe), params, h=1e-5, tol=1e-4)
    assert rep.passed, rep.flagged[:3]


def test_lstm_gradients():
    rng = np.random.default_rng(15)
    p = LstmParams.init(3, 2, rng=rng)
    v = frames(rng, 4, 3, valid=3)
    params = {"v": v.value, **p.arrays("p.")}
    _grad_case(lambda P: context.lstm_encode(FrameFeatures(P["v"] * v.mask[:, None], v.mask), p.bind(P, "p.")).node, params, (4, 3), rng)


def test_transformer_gradients():
    rng = np.random.default_rng(16)
    p = TransformerParams.init(4, 1, 2, 3, rng=rng)
    p.tensors = randomize(p.tensors, rng)
    v = frames(rng, 3, 4, valid=2)
    params = {"v": v.value, **p.arrays("p.")}
    _grad_case(
        lambda P: context.transformer_encode(FrameFeatures(P["v"] * v.mask[:, None], v.mask), p.bind(P, "p.")).node,
        params,
        (3, 4),
        rng,
    )


def test_tight_gradients():
    rng = np.random.default_rng(17)
    p = TightParams.init(4, 3, 1, 2, rng=rng)
    p.tensors = randomize(p.tensors, rng)
    g = gates.init_gate(3, GateParadigm(EXPANSION, 2), SIGMOID, "uniform", rng)
    v = frames(rng, 3, 4, valid=2)
    params = {"t": rng.normal(size=4), "v": v.value, **p.arrays("p."), **g.arrays("g.")}
    _grad_case(
        lambda P: context.tight_score(
            P["t"], FrameFeatures(P["v"] * v.mask[:, None], v.mask), p.bind(P, "p."), g.bind(P, "g.")
        ),
        params,
        (),
        rng,
    )
