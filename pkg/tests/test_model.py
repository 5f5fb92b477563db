import numpy as np
import pytest

from biatten import checkpoint
from biatten.model import (
    MODES,
    PROBE_STAGES,
    MODE_LABELS,
    ModelConfig,
    attention,
    bab_forward,
    forward,
    init_model,
    predict,
    probe_features,
)
from biatten.tensor import ShapeError, Tensor
from conftest import model_gradcheck

TINY = dict(channels=4, depth=1, hidden=8, patch_size=8, pool_out=(2, 2))


def _qkv(r, shape=(2, 3, 6, 6)):
    return [Tensor(r.standard_normal(shape)) for _ in range(3)]


def _zero_bab(bab):
    for branch in (bab.hr, bab.sr):
        for conv in (branch.q, branch.k, branch.v):
            conv.weight.data[...] = 0
            conv.bias.data[...] = 0


@pytest.mark.parametrize("seed", range(10))
def test_attention_rows_sum_to_one(seed):
    q, k, v = _qkv(np.random.default_rng(seed))
    _, a, _ = attention(q, k, v)
    np.testing.assert_allclose(a.data.sum(axis=-1), 1.0, atol=1e-6)
    assert a.shape == (2, 3, 6, 6)


@pytest.mark.parametrize("factor", [1e-2, 0.5, 3.0, 40.0])
def test_attention_invariant_to_common_qk_rescaling(factor):
    q, k, v = _qkv(np.random.default_rng(1))
    _, a, _ = attention(q, k, v)
    _, b, _ = attention(Tensor(q.data * factor), Tensor(k.data * factor), v)
    np.testing.assert_allclose(b.data, a.data, atol=1e-5)


def test_attention_single_position_returns_values_exactly():
    q, k, v = _qkv(np.random.default_rng(2), (3, 4, 1, 1))
    out, a, _ = attention(q, k, v)
    np.testing.assert_array_equal(out.data, v.data)
    np.testing.assert_array_equal(a.data, 1.0)


def test_zero_queries_give_uniform_weights():
    q, k, v = _qkv(np.random.default_rng(3))
    out, a, _ = attention(Tensor(np.zeros(q.shape)), k, v)
    np.testing.assert_allclose(a.data, 1 / 6)
    np.testing.assert_allclose(out.data, np.broadcast_to(v.data.mean(axis=-2, keepdims=True), v.shape))


def test_attention_rejects_non_square_maps():
    with pytest.raises(ShapeError):
        attention(*(Tensor(np.zeros((1, 1, 2, 3))) for _ in range(3)))


@pytest.mark.parametrize("mode", MODES)
def test_zeroed_projections_make_block_identity(mode):
    m = init_model(ModelConfig(mode=mode, **TINY), seed=0, dtype=np.float64)
    _zero_bab(m.bab1)
    r = np.random.default_rng(4)
    x_hr, x_sr = Tensor(r.standard_normal((2, 4, 8, 8))), Tensor(r.standard_normal((2, 4, 8, 8)))
    y_hr, y_sr, _, _ = bab_forward(x_hr, x_sr, m.bab1, mode)
    np.testing.assert_array_equal(y_hr.data, x_hr.data)
    np.testing.assert_array_equal(y_sr.data, x_sr.data)


def test_modes_pick_expected_keys():
    m = init_model(ModelConfig(**TINY), seed=1, dtype=np.float64)
    r = np.random.default_rng(5)
    x_hr, x_sr = Tensor(r.standard_normal((1, 4, 8, 8))), Tensor(r.standard_normal((1, 4, 8, 8)))
    maps = {mode: bab_forward(x_hr, x_sr, m.bab1, mode)[2:] for mode in MODES}
    # the HR branch sees the same key in modes that agree on its key
    np.testing.assert_array_equal(maps["Bidirectional"][0].data, maps["SRtoHR"][0].data)
    np.testing.assert_array_equal(maps["NoBAB"][0].data, maps["HRtoSR"][0].data)
    np.testing.assert_array_equal(maps["Bidirectional"][1].data, maps["HRtoSR"][1].data)
    np.testing.assert_array_equal(maps["NoBAB"][1].data, maps["SRtoHR"][1].data)
    assert not np.allclose(maps["Bidirectional"][0].data, maps["NoBAB"][0].data)


def test_identical_inputs_shared_weights_modes_agree():
    r = np.random.default_rng(6)
    x = r.uniform(0, 1, (3, 3, 8, 8))
    base = init_model(ModelConfig(shared_branches=True, **TINY), seed=2, dtype=np.float64)
    scores = []
    for mode in MODES:
        m = base.copy()
        m.config = ModelConfig(mode=mode, shared_branches=True, **TINY)
        scores.append(predict(x, x.copy(), m))
    for s in scores[1:]:
        np.testing.assert_allclose(s, scores[0], atol=1e-6)


def test_shared_branches_deduplicate_parameters():
    shared = init_model(ModelConfig(shared_branches=True, **TINY))
    separate = init_model(ModelConfig(**TINY))
    assert shared.encoder_hr is shared.encoder_sr
    n_shared = sum(p.size for p in shared.parameters())
    n_separate = sum(p.size for p in separate.parameters())
    assert n_shared < n_separate
    assert not any(k.startswith("encoder_sr") for k in shared.named_parameters())


@pytest.mark.parametrize("seed", range(3))
def test_full_model_gradient(seed):
    cfg = ModelConfig(channels=4, depth=2, hidden=16, patch_size=8, pool_out=(4, 4))
    m = init_model(cfg, seed=seed, dtype=np.float64)
    r = np.random.default_rng(seed)
    hr, sr = r.uniform(0, 1, (3, 3, 8, 8)), r.uniform(0, 1, (3, 3, 8, 8))
    assert model_gradcheck(m, hr, sr, seed=seed) < 1e-3


def test_init_is_seeded():
    a = init_model(ModelConfig(**TINY), seed=3).state_dict()
    b = init_model(ModelConfig(**TINY), seed=3).state_dict()
    c = init_model(ModelConfig(**TINY), seed=4).state_dict()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert any(a[k].tobytes() != c[k].tobytes() for k in a)


def test_forward_output_shape_and_dtype():
    m = init_model(ModelConfig(**TINY))
    x = np.zeros((5, 3, 8, 8), np.float32)
    out = forward(x, x, m)
    assert out.shape == (5,) and out.dtype == np.float32
    assert predict(x[0], x[0], m).shape == (1,)


def test_forward_rejects_wrong_patch_size():
    m = init_model(ModelConfig(**TINY))
    with pytest.raises(ShapeError):
        forward(np.zeros((1, 3, 16, 16)), np.zeros((1, 3, 16, 16)), m)
    with pytest.raises(ShapeError):
        forward(np.zeros((1, 3, 8, 8)), np.zeros((2, 3, 8, 8)), m)


def test_eval_mode_leaves_running_stats_alone():
    m = init_model(ModelConfig(**TINY))
    before = {k: v.copy() for k, v in m.named_buffers().items()}
    predict(np.ones((2, 3, 8, 8)), np.zeros((2, 3, 8, 8)), m)
    assert all(np.array_equal(before[k], v) for k, v in m.named_buffers().items())
    forward(np.random.default_rng(0).uniform(size=(2, 3, 8, 8)), np.zeros((2, 3, 8, 8)), m, training=True)
    assert not np.array_equal(before["encoder_hr.0.bn.running_mean"], m.named_buffers()["encoder_hr.0.bn.running_mean"])


def test_state_dict_checkpoint_round_trip():
    m = init_model(ModelConfig(**TINY), seed=5)
    blob = checkpoint.dumps(m.state_dict())
    other = init_model(ModelConfig(**TINY), seed=6)
    other.load_state_dict(checkpoint.loads(blob))
    x = np.random.default_rng(1).uniform(size=(2, 3, 8, 8)).astype(np.float32)
    assert predict(x, x[::-1], m).tobytes() == predict(x, x[::-1], other).tobytes()
    assert checkpoint.dumps(other.state_dict()) == blob


def test_load_state_dict_mismatch():
    m = init_model(ModelConfig(**TINY))
    sd = m.state_dict()
    with pytest.raises(KeyError):
        m.load_state_dict({k: v for k, v in sd.items() if k != "head.fc2.bias"})
    bad = dict(sd)
    bad["head.fc2.bias"] = np.zeros(3, np.float32)
    with pytest.raises(ShapeError):
        m.load_state_dict(bad)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(mode="Sideways")
    with pytest.raises(ValueError):
        ModelConfig(channels=0)
    with pytest.raises(ValueError):
        ModelConfig(patch_size=8, pool_out=(16, 16))
    cfg = ModelConfig(**TINY)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_table_labels_cover_modes():
    assert set(MODE_LABELS) == set(MODES)


def test_probe_on_identical_inputs():
    # 8 px maps are below the 11 px SSIM window, so probe at patch size 16
    cfg = ModelConfig(shared_branches=True, channels=4, depth=1, hidden=8, patch_size=16, pool_out=(2, 2))
    m = init_model(cfg, seed=0, dtype=np.float64)
    x = np.random.default_rng(2).uniform(size=(3, 16, 16))
    dump = probe_features(x, x.copy(), m)
    assert len(dump.rows) == 2 * len(PROBE_STAGES)
    for row in dump.rows:
        assert row["ssim_cross_branch"] == pytest.approx(1.0, abs=1e-9)
    np.testing.assert_array_equal(dump.maps[("hr", "bab1_after")], dump.maps[("hr", "bab2_before")])
    for a in dump.attention.values():
        np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-9)
