import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from svforge import tensor as T
from svforge.checkpoint import CheckpointError, dumps, loads
from svforge.encoder import ConformerConfig, ConformerEncoder, LoRA, StructureError
from svforge.oracles import TOLERANCES


def _enc(cfg, seed=0):
    return ConformerEncoder(cfg, np.random.default_rng(seed))


def _feats(cfg, t=20, b=2, seed=1):
    return np.random.default_rng(seed).normal(size=(b, t, cfg.input_dim))


def _ones(enc):
    return {k: np.ones(n) for k, n in enc.gate_layout().items()}


def test_config_validation():
    with pytest.raises(ValueError):
        ConformerConfig(num_heads=3, head_dim=16, model_dim=64)
    with pytest.raises(ValueError):
        ConformerConfig(conv_kernel=4)
    with pytest.raises(ValueError):
        ConformerConfig(num_layers=0)


def test_stack_length_and_frames(toy_cfg):
    enc = _enc(toy_cfg)
    s = enc.encode(np.random.default_rng(0).normal(size=(98, 80)))
    assert len(s) == 5
    assert all(h.shape == (1, 49, 64) for h in s)


def test_too_few_frames_raises(tiny_cfg):
    with pytest.raises(ValueError):
        _enc(tiny_cfg).encode(np.zeros((1, tiny_cfg.input_dim)))


def test_wrong_feature_dim_raises(tiny_cfg):
    with pytest.raises(StructureError):
        _enc(tiny_cfg).encode(np.zeros((8, tiny_cfg.input_dim + 1)))


def test_unit_gates_are_bit_identical(tiny_cfg):
    enc = _enc(tiny_cfg)
    x = _feats(tiny_cfg)
    ref = enc.encode(x)
    enc.apply_gates(_ones(enc))
    gated = enc.encode(x)
    for a, b in zip(ref, gated):
        assert np.array_equal(a.data, b.data)


def test_eval_mode_is_deterministic(tiny_cfg):
    cfg = ConformerConfig(**{**tiny_cfg.__dict__, "dropout_rate": 0.1})
    enc = _enc(cfg)
    x = _feats(cfg)
    a = enc.encode(x, np.random.default_rng(0))
    b = enc.encode(x, np.random.default_rng(1))
    assert np.array_equal(a[-1].data, b[-1].data)
    enc.train()
    c = enc.encode(x, np.random.default_rng(0))
    assert not np.array_equal(a[-1].data, c[-1].data)


def test_zeroed_head_matches_masked_output_projection(tiny_cfg):
    enc = _enc(tiny_cfg)
    x = _feats(tiny_cfg)
    gates = _ones(enc)
    gates[(0, "head")][1] = 0.0
    enc.apply_gates(gates)
    gated = enc.encode(x)
    ref = _enc(tiny_cfg)
    dh = tiny_cfg.head_dim
    ref.layers[0].mhsa.wo.weight.data[dh:2 * dh] = 0.0
    plain = ref.encode(x)
    for a, b in zip(gated, plain):
        assert np.max(np.abs(a.data - b.data)) < TOLERANCES["head_mask"]


def test_closed_ffn_leaves_only_residual_and_bias(tiny_cfg):
    enc = _enc(tiny_cfg)
    x = _feats(tiny_cfg)
    gates = _ones(enc)
    gates[(1, "ffn2")][:] = 0.0
    enc.apply_gates(gates)
    out = enc.encode(x)[-1].data
    # with every unit closed the branch no longer depends on w1 or w2's weight
    enc.layers[1].ffn2.w1.weight.data = np.random.default_rng(9).normal(size=enc.layers[1].ffn2.w1.weight.shape)
    enc.layers[1].ffn2.w2.weight.data[:] = 0.0
    assert np.array_equal(out, enc.encode(x)[-1].data)


@given(st.floats(0, 1), st.integers(0, 100))
def test_gating_preserves_residual_dim(v, seed):
    cfg = ConformerConfig(num_layers=1, model_dim=8, ffn_dim=6, num_heads=2, head_dim=4, conv_kernel=3,
                          dropout_rate=0.0, input_dim=4, max_rel_pos=3)
    enc = _enc(cfg, seed)
    gates = {k: np.full(n, v) for k, n in enc.gate_layout().items()}
    enc.apply_gates(gates)
    for h in enc.encode(np.zeros((6, 4)) + seed):
        assert h.shape == (1, 3, 8)


def test_gate_layout_mismatch_raises(tiny_cfg):
    enc = _enc(tiny_cfg)
    bad = _ones(enc)
    bad[(0, "conv")] = np.ones(3)
    with pytest.raises(StructureError):
        enc.apply_gates(bad)


def test_lora_zero_init_matches_base(tiny_cfg):
    enc = _enc(tiny_cfg)
    x = _feats(tiny_cfg)
    ref = enc.encode(x)[-1].data
    enc.attach_lora_all(4, 8.0, np.random.default_rng(3))
    assert np.array_equal(enc.encode(x)[-1].data, ref)
    assert not enc.layers[0].mhsa.wq.weight.requires_grad


def test_lora_scale():
    assert LoRA(8, 8, 64, 128.0, np.random.default_rng(0)).scale == 2.0


def test_lora_matches_explicit_matrix():
    rng = np.random.default_rng(4)
    W = rng.normal(size=(8, 8))
    lora = LoRA(8, 8, 3, 6.0, rng)
    lora.B.data = rng.normal(size=(3, 8))
    x = rng.normal(size=(5, 8))
    out = (T.matmul(T.Tensor(x), T.Tensor(W)) + lora(T.Tensor(x))).data
    assert np.max(np.abs(out - x @ (W + 2.0 * lora.A.data @ lora.B.data))) < TOLERANCES["lora_explicit"]


def test_duplicate_lora_raises(tiny_cfg):
    enc = _enc(tiny_cfg)
    enc.attach_lora(0, "query", 2, 4.0, np.random.default_rng(0))
    with pytest.raises(StructureError):
        enc.attach_lora(0, "query", 2, 4.0, np.random.default_rng(0))


@pytest.mark.parametrize("seed", range(3))
def test_merge_equals_adapted_forward(tiny_cfg, seed):
    enc = _enc(tiny_cfg, seed)
    base_count = enc.num_parameters()
    rng = np.random.default_rng(seed)
    enc.attach_lora_all(2, 4.0, rng)
    for layer in enc.layers:
        for lora in layer.mhsa.lora.values():
            lora.B.data = rng.normal(size=lora.B.shape) * 0.2
    x = _feats(tiny_cfg, seed=seed)
    adapted = enc.encode(x)
    enc.merge_lora()
    merged = enc.encode(x)
    assert not enc.has_lora() and enc.num_parameters() == base_count
    for a, b in zip(adapted, merged):
        assert np.max(np.abs(a.data - b.data)) < TOLERANCES["lora_merge"]
    snap = enc.state_dict()
    enc.merge_lora()
    assert all(np.array_equal(snap[k], v) for k, v in enc.state_dict().items())


def test_merge_with_zero_b_keeps_weights(tiny_cfg):
    enc = _enc(tiny_cfg)
    before = enc.state_dict()
    enc.attach_lora_all(2, 4.0, np.random.default_rng(0))
    enc.merge_lora()
    assert all(np.array_equal(before[k], v) for k, v in enc.state_dict().items())


def test_prunable_counts_sum_to_parameter_total(tiny_cfg):
    enc = _enc(tiny_cfg)
    counts, layout = enc.prunable_counts(), enc.gate_layout()
    assert sum(counts[k] * layout[k] for k in layout) == enc.prunable_parameter_count()


@given(st.dictionaries(st.text(min_size=1, max_size=12), st.lists(st.integers(1, 4), max_size=3), max_size=5),
       st.sampled_from(["f32", "f64"]))
def test_checkpoint_round_trip(shapes, dtype):
    rng = np.random.default_rng(len(shapes))
    tensors = {k: rng.normal(size=tuple(s)) for k, s in shapes.items()}
    back = loads(dumps(tensors, dtype))
    assert sorted(back) == sorted(tensors)
    for k, v in tensors.items():
        ref = v.astype(np.float32).astype(np.float64) if dtype == "f32" else v
        assert back[k].shape == v.shape and np.array_equal(back[k], ref)


def test_checkpoint_layout_bytes():
    blob = dumps({"a": np.array([1.5])})
    assert blob[:8] == b"SVFORGE1"
    assert struct.unpack_from("<I", blob, 8)[0] == 1
    assert struct.unpack_from("<H", blob, 12)[0] == 1 and blob[14:15] == b"a"
    assert blob[15] == 1 and struct.unpack_from("<I", blob, 16)[0] == 1 and blob[20] == 1
    assert struct.unpack_from("<d", blob, 21)[0] == 1.5 and len(blob) == 29


def test_checkpoint_rejects_garbage():
    with pytest.raises(CheckpointError):
        loads(b"NOTMAGIC")
    with pytest.raises(CheckpointError):
        loads(dumps({"a": np.ones(2)}) + b"x")
