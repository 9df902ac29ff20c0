import numpy as np
import pytest

from taskhyper import numerics as nx
from taskhyper.numerics import ShapeError, Tensor
from taskhyper.transformer import (
    BOS_ID,
    EOS_ID,
    LayerAdaptation,
    ModelConfig,
    Parameters,
    SequenceLengthError,
    Transformer,
    attention,
)


def _ids(rng, B, S):
    return rng.integers(0, 256, size=(B, S))


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(heads=3, head_dim=16)
    with pytest.raises(ValueError):
        ModelConfig(layers=0)
    c = ModelConfig()
    assert ModelConfig.from_dict(c.to_dict()) == c
    assert c.total_layers == 4


def test_forward_shapes(tiny_config, rng):
    m = Transformer(tiny_config)
    enc = m.encode_batch(_ids(rng, 3, 5))
    assert enc.states.shape == (3, 5, 8)
    logits = m.decode_batch(enc, _ids(rng, 3, 4))
    assert logits.shape == (3, 4, 260)


def test_decoder_is_causal(tiny_config, rng):
    m = Transformer(tiny_config)
    enc = m.encode_batch(_ids(rng, 1, 6))
    dec = _ids(rng, 1, 5)
    base = m.decode_batch(enc, dec).data
    changed = dec.copy()
    changed[0, 3:] = (changed[0, 3:] + 7) % 256
    other = m.decode_batch(enc, changed).data
    np.testing.assert_allclose(base[0, :3], other[0, :3], atol=1e-12)
    assert not np.allclose(base[0, 3:], other[0, 3:])


def test_padding_does_not_leak(tiny_config, rng):
    m = Transformer(tiny_config)
    ids = _ids(rng, 1, 4)
    padded = np.concatenate([ids, np.full((1, 3), 256)], axis=1)
    mask = np.array([[True] * 4 + [False] * 3])
    a = m.encode_batch(ids)
    b = m.encode_batch(padded, mask)
    np.testing.assert_allclose(a.states.data, b.states.data[:, :4], atol=1e-12)
    dec = _ids(rng, 1, 3)
    np.testing.assert_allclose(m.decode_batch(a, dec).data, m.decode_batch(b, dec).data, atol=1e-12)


def test_batch_rows_are_independent(tiny_config, rng):
    m = Transformer(tiny_config)
    ids = _ids(rng, 3, 5)
    dec = _ids(rng, 3, 2)
    full = m.decode_batch(m.encode_batch(ids), dec).data
    for b in range(3):
        one = m.decode_batch(m.encode_batch(ids[b:b + 1]), dec[b:b + 1]).data
        np.testing.assert_allclose(full[b], one[0], atol=1e-12)


def test_length_limits(tiny_config):
    m = Transformer(tiny_config)
    with pytest.raises(SequenceLengthError):
        m.encode_batch(np.zeros((1, tiny_config.max_seq_len + 1), dtype=int))
    enc = m.encode_batch(np.zeros((1, 2), dtype=int))
    with pytest.raises(SequenceLengthError):
        m.decode_batch(enc, np.zeros((1, tiny_config.max_seq_len + 1), dtype=int))


def test_attention_prefix_only_extends_keys(rng):
    q = Tensor(rng.normal(size=(2, 2, 3, 4)))
    k = Tensor(rng.normal(size=(2, 2, 5, 4)))
    v = Tensor(rng.normal(size=(2, 2, 5, 4)))
    pk, pv = Tensor(rng.normal(size=(2, 2, 4))), Tensor(rng.normal(size=(2, 2, 4)))
    out, w = attention(q, k, v, prefix=(pk, pv), causal=True, return_weights=True)
    assert out.shape == (2, 2, 3, 4)
    assert w.shape == (2, 2, 3, 7)
    # prefix slots are always visible, non-prefix keys are causally masked
    assert np.all(w.data[..., :2] > 0)
    assert np.all(w.data[:, :, 0, 3:] < 1e-300)
    np.testing.assert_allclose(w.data.sum(-1), 1.0)


def test_attention_empty_prefix_is_noop(rng):
    q = Tensor(rng.normal(size=(1, 2, 3, 4)))
    k = Tensor(rng.normal(size=(1, 2, 3, 4)))
    empty = (Tensor(np.zeros((0, 2, 4))), Tensor(np.zeros((0, 2, 4))))
    np.testing.assert_array_equal(attention(q, k, k).data, attention(q, k, k, prefix=empty).data)


def test_attention_shape_errors(rng):
    q = Tensor(rng.normal(size=(1, 2, 3, 4)))
    with pytest.raises(ShapeError):
        attention(q, Tensor(np.ones((1, 2, 3, 5))), Tensor(np.ones((1, 2, 3, 5))))
    with pytest.raises(ShapeError):
        attention(q, q, q, prefix=(Tensor(np.ones((2, 3, 4))), Tensor(np.ones((2, 3, 4)))))


def test_adaptation_count_checked(tiny_config, rng):
    m = Transformer(tiny_config)
    with pytest.raises(ShapeError):
        m.encode_batch(_ids(rng, 1, 3), adaptations=[LayerAdaptation()])
    bad = LayerAdaptation(adapter=(Tensor(np.ones((5, 4))), Tensor(np.ones((4, 8)))))
    with pytest.raises(ShapeError):
        m.encode_batch(_ids(rng, 1, 3), adaptations=[bad, bad])


def test_greedy_decode_matches_stepwise_argmax(tiny_config):
    m = Transformer(tiny_config, seed=3)
    enc = m.encode([1, 2, 3, 4])
    out = m.greedy_decode(enc, max_len=5)
    prev = []
    for tok in out:
        step = m.decode_step(enc, prev).data
        assert int(step.argmax()) == tok
        prev.append(tok)
    assert len(out) == 5 or int(m.decode_step(enc, prev).data.argmax()) == EOS_ID


def test_parameters_store(tiny_config):
    P = Parameters()
    Transformer(tiny_config, P)
    with pytest.raises(KeyError):
        P.add("model.embed", np.zeros(1))
    state = P.state()
    fresh = Parameters()
    Transformer(tiny_config, fresh, seed=9)
    fresh.load_state(state)
    for name, t in fresh.items():
        np.testing.assert_array_equal(t.data, state[name])
    with pytest.raises(KeyError):
        fresh.load_state({"model.embed": state["model.embed"]}, strict=True)
    with pytest.raises(ShapeError):
        fresh.load_state(dict(state, **{"model.embed": np.zeros((2, 2))}))


def test_trace_records_key_lengths(tiny_config):
    m = Transformer(tiny_config)
    m.trace = []
    enc = m.encode_batch(np.zeros((1, 4), dtype=int))
    m.decode_batch(enc, np.full((1, 2), BOS_ID))
    sites = dict(m.trace)
    assert sites["enc0.self"] == (4, 4)
    assert sites["dec1.cross"] == (2, 4)
    assert sites["dec0.self"] == (2, 2)
