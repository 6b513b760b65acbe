import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssmrec.errors import ConfigError, DataError, ShapeError
from ssmrec.model import ENCODERS, ModelConfig, SeqRecModel, pad_truncate
from ssmrec.numerics import Tensor, make_rng


def _model(encoder, **kw):
    base = dict(encoder=encoder, max_len=12, d_model=4, vocab_size=20, layers=2, d_state=3)
    base.update(kw)
    return SeqRecModel(ModelConfig(**base), seed=0)


# ---------------------------------------------------------------- padding

def test_pad_truncate_examples():
    assert pad_truncate([5, 6, 7], 5).tolist() == [0, 0, 5, 6, 7]
    assert pad_truncate(list(range(1, 11)), 4).tolist() == [7, 8, 9, 10]
    assert pad_truncate([5, 6, 7], 3).tolist() == [5, 6, 7]
    assert pad_truncate([], 3).tolist() == [0, 0, 0]


def test_pad_truncate_rejects_bad_ids():
    with pytest.raises(DataError):
        pad_truncate([3, 0], 4)
    with pytest.raises(DataError):
        pad_truncate([3, 9], 4, vocab_size=9)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 50), max_size=30), st.integers(1, 20))
def test_pad_truncate_keeps_suffix(seq, L):
    out = pad_truncate(seq, L)
    keep = seq[-L:] if seq else []
    assert out.shape == (L,)
    assert out[L - len(keep):].tolist() == keep
    assert np.all(out[:L - len(keep)] == 0)


# ---------------------------------------------------------------- config

def test_config_validation():
    for bad in (dict(max_len=1), dict(vocab_size=1), dict(encoder="cnn"), dict(dtype="float16"),
                dict(scan_mode="fast"), dict(encoder="attention", d_model=5, heads=2)):
        with pytest.raises(ConfigError):
            ModelConfig(**bad)
    assert ModelConfig(encoder="linear").encoder == "linear_attention"
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"encoder": "ssm", "hidden": 3})
    cfg = ModelConfig(encoder="gru", d_model=7)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


# ---------------------------------------------------------------- encoder stack

@pytest.mark.parametrize("encoder", ENCODERS)
def test_encode_shape(encoder):
    m = _model(encoder, max_len=8)
    ids = make_rng(0).integers(0, 20, size=(2, 8))
    assert m.encode(ids).shape == (2, 8, 4)
    with pytest.raises(ShapeError):
        m.encode(ids[0])
    with pytest.raises(DataError):
        m.encode(ids + 20)


def test_all_padding_ssm_is_zero_before_final_norm():
    m = _model("ssm")
    out = m.encode(np.zeros((1, 12), dtype=np.int64), final_norm=False).data
    assert np.all(out[:, -1] == 0.0)


@pytest.mark.parametrize("encoder", ENCODERS)
def test_left_padding_invariance(encoder):
    m = _model(encoder, max_len=5)
    padded = m.encode(np.array([[0, 0, 5, 6, 7]])).data[0, -1]
    bare = m.encode(np.array([[5, 6, 7]])).data[0, -1]
    assert np.max(np.abs(padded - bare)) < 1e-9


@pytest.mark.parametrize("encoder", ENCODERS)
def test_truncation_window(encoder):
    m = _model(encoder, max_len=6)
    seq = list(make_rng(1).integers(1, 20, size=10))
    a = m.score_histories(pad_truncate(seq, 6)[None])
    b = m.score_histories(pad_truncate([3, 4] + seq, 6)[None])
    np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------- scoring head

def test_orthonormal_embeddings_score_one_hot():
    m = SeqRecModel(ModelConfig(encoder="gru", max_len=4, d_model=5, vocab_size=6), seed=0)
    table = np.zeros((6, 5))
    table[1:] = np.eye(5)
    m.item_embedding.data[:] = table
    scores = m.score_items(Tensor(table[3][None])).data
    assert scores.tolist() == [[0.0, 0.0, 1.0, 0.0, 0.0]]


def test_score_all_width_and_candidate_forms():
    m = _model("ssm")
    h = m.user_representation(np.array([[0, 1, 2, 3] * 3, [4] * 12]))
    full = m.score_items(h).data
    assert full.shape == (2, 19)
    shared = m.score_items(h, np.array([3, 7])).data
    np.testing.assert_allclose(shared, full[:, [2, 6]], atol=1e-12)
    per_row = m.score_items(h, np.array([[3, 7], [1, 19]])).data
    np.testing.assert_allclose(per_row, [full[0, [2, 6]], full[1, [0, 18]]], atol=1e-12)
    with pytest.raises(DataError):
        m.score_items(h, np.array([0, 1]))


@pytest.mark.parametrize("encoder", ENCODERS)
def test_untied_head_adds_v_times_d_parameters(encoder):
    tied = _model(encoder)
    untied = _model(encoder, tie_output_embeddings=False)
    assert untied.num_parameters() - tied.num_parameters() == 20 * 4


@pytest.mark.parametrize("encoder", ENCODERS)
def test_parameter_census_is_one_to_one(encoder):
    m = _model(encoder, tie_output_embeddings=False)
    named = m.named_parameters()
    assert len({id(p) for p in named.values()}) == len(named)
    # every array attribute the model owns is reachable by exactly one name
    m2 = _model(encoder, tie_output_embeddings=False)
    arrays = {k: v.data + 1.0 for k, v in named.items()}
    m2.load_arrays(arrays)
    for k, v in m2.named_parameters().items():
        np.testing.assert_array_equal(v.data, arrays[k])
    with pytest.raises(ShapeError):
        m2.load_arrays({k: v for k, v in arrays.items() if k != "item_embedding"})


def test_padding_row_is_zero_and_seeded_init_is_deterministic():
    a, b = _model("attention"), _model("attention")
    assert np.all(a.item_embedding.data[0] == 0.0)
    for (k, x), (_, y) in zip(a.named_parameters().items(), b.named_parameters().items()):
        np.testing.assert_array_equal(x.data, y.data, err_msg=k)


def test_float32_model_stays_float32():
    m = _model("ssm", dtype="float32")
    assert m.encode(np.array([[0, 1, 2, 3] * 3])).data.dtype == np.float32
