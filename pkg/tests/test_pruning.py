import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from svforge.encoder import ConformerConfig, ConformerEncoder, StructureError
from svforge.losses import distill_floor, distill_loss
from svforge.oracles import TOLERANCES, expected_l0_loop, gate_open_prob_direct, hard_concrete_mc
from svforge.pruning import (BETA, LOG_RATIO, GateSet, PruneConfig, PruningError, SparsityController,
                             achieved_sparsity, deterministic_gate, encoder_checksum, extract_pruned, gate_open_prob,
                             lagrangian_penalty, prune_train, pruning_report, sample_gate)
from svforge.training import AdamW

HALF_POINT = BETA * LOG_RATIO


def _enc(cfg, seed=0):
    return ConformerEncoder(cfg, np.random.default_rng(seed))


@pytest.mark.parametrize("la,expect", [(40.0, 1.0), (-40.0, 0.0)])
def test_saturated_gates(la, expect):
    z = sample_gate(np.full(100_000, la), np.random.default_rng(0)).data
    assert np.all(z == expect)
    assert deterministic_gate(np.array([la])).data[0] == expect


def test_sample_bounds():
    z, raw = sample_gate(np.random.default_rng(1).normal(0, 3, 50_000), np.random.default_rng(2), return_raw=True)
    assert z.data.min() >= 0.0 and z.data.max() <= 1.0
    assert raw.data.min() >= -0.1 and raw.data.max() <= 1.1


def test_open_prob_half_point_and_limit():
    assert gate_open_prob(np.array(HALF_POINT)).item() == 0.5
    assert gate_open_prob(np.array(-200.0)).item() < 1e-80


@pytest.mark.parametrize("la", [-2.0, 0.0, 2.0])
def test_monte_carlo_open_probability(la):
    n = 1_000_000
    z = sample_gate(np.full(n, la), np.random.default_rng(int(la * 10) + 70)).data
    p = gate_open_prob(np.array(la)).item()
    se = math.sqrt(p * (1 - p) / n)
    assert abs((z > 0).mean() - p) < 3 * se
    assert p == pytest.approx(gate_open_prob_direct(la), abs=1e-15)
    # the numpy oracle sampler agrees with the implementation too
    zo, _ = hard_concrete_mc(la, n, np.random.default_rng(99))
    assert abs((zo > 0).mean() - p) < 3 * se


def test_deterministic_gate_values():
    assert deterministic_gate(np.array([0.0])).data[0] == pytest.approx(0.5, abs=1e-15)


def _gateset(rng, n_keys=4):
    layout = {(i // 4, ["head", "ffn1", "ffn2", "conv"][i % 4]): int(rng.integers(1, 6)) for i in range(n_keys)}
    counts = {k: int(rng.integers(1, 200)) for k in layout}
    g = GateSet(layout, counts, init=0.0)
    for la in g.log_alpha.values():
        la.data = rng.normal(0, 3, la.shape)
    return g


def test_expected_l0_half_and_saturated():
    g = GateSet({(0, "head"): 3, (0, "conv"): 2}, {(0, "head"): 10, (0, "conv"): 7}, init=HALF_POINT)
    assert g.expected_l0().item() == pytest.approx(0.5 * g.total_count, abs=1e-12)
    g1 = GateSet({(0, "head"): 1}, {(0, "head"): 100}, init=40.0)
    assert g1.expected_l0().item() == pytest.approx(100.0, abs=1e-12)


@given(st.integers(0, 10_000))
def test_expected_l0_matches_loop(seed):
    g = _gateset(np.random.default_rng(seed), 8)
    ref = expected_l0_loop(g.group_counts(), g.flat_log_alpha())
    assert abs(g.expected_l0().item() - ref) <= TOLERANCES["expected_l0"] * max(1.0, ref)


@given(st.integers(0, 10_000), st.floats(0.01, 3.0))
def test_expected_l0_monotone(seed, bump):
    rng = np.random.default_rng(seed)
    g = _gateset(rng)
    base = g.expected_l0().item()
    la = list(g.log_alpha.values())[int(rng.integers(len(g.log_alpha)))]
    la.data[int(rng.integers(la.shape[0]))] += bump
    assert g.expected_l0().item() > base


def test_gateset_covers_encoder(tiny_cfg):
    enc = _enc(tiny_cfg)
    g = GateSet.for_encoder(enc)
    assert g.total_count == enc.prunable_parameter_count()
    assert len(g.groups) == sum(enc.gate_layout().values())
    assert all(gr.param_count > 0 for gr in g.groups)
    assert {gr.kind for gr in g.groups} == {"attention-head", "ffn-unit", "conv-channel"}
    assert all(k.startswith("gate.") for k in g.tensors())


def test_penalty_examples():
    g = GateSet({(0, "head"): 2}, {(0, "head"): 10}, init=HALF_POINT)  # sparsity 0.5
    c = SparsityController(0.5, warmup_steps=0)
    c.lambda1.data, c.lambda2.data = np.array(3.0), np.array(5.0)
    assert lagrangian_penalty(c, g).item() == pytest.approx(0.0, abs=1e-15)
    c2 = SparsityController(0.4, warmup_steps=0)
    assert lagrangian_penalty(c2, g).item() == 0.0
    c2.lambda2.data = np.array(1.0)
    assert lagrangian_penalty(c2, g).item() == pytest.approx(0.01, abs=1e-12)


def test_warmup_ramp():
    c = SparsityController(0.5, warmup_steps=500)
    assert c.target_at(0) == 0.0
    assert c.target_at(250) == 0.25
    assert c.target_at(500) == 0.5 and c.target_at(10_000) == 0.5


def test_multiplier_ascent_raises_constraint_pressure():
    g = GateSet({(0, "ffn1"): 4}, {(0, "ffn1"): 10}, init=2.0)  # sparsity well below target
    c = SparsityController(0.5, warmup_steps=0)
    opt = AdamW(c.named_parameters(), 0.1, weight_decay=0.0, maximize=True)
    pressure = []
    for _ in range(5):
        for p in g.parameters() + c.parameters():
            p.grad = None
        lagrangian_penalty(c, g).backward()
        pressure.append(np.abs(np.concatenate([p.grad for p in g.parameters()])).sum())
        opt.step()
    assert all(b > a for a, b in zip(pressure, pressure[1:]))
    # maximisation drives lambda1 against the sign of the violation (s - t < 0)
    assert c.lambda1.item() < 0


def _random_gates(enc, rng, p_closed=0.3):
    out = {}
    for k, n in enc.gate_layout().items():
        z = rng.uniform(0.05, 1.0, n)
        z[rng.random(n) < p_closed] = 0.0
        if k[1] == "head" and not np.any(z > 0):
            z[0] = 0.7
        out[k] = z
    return out


@pytest.mark.parametrize("seed", range(3))
def test_extraction_matches_gated_forward(tiny_cfg, seed):
    rng = np.random.default_rng(seed)
    enc = _enc(tiny_cfg, seed)
    for p in enc.parameters():
        if p.data.ndim == 1:
            p.data = rng.normal(0, 0.1, p.shape)  # exercise every bias slice
    gates = _random_gates(enc, rng)
    small = extract_pruned(enc, gates)
    enc.apply_gates(gates)
    worst = 0.0
    for _ in range(20):
        x = rng.normal(size=(1, int(rng.integers(4, 14)), tiny_cfg.input_dim))
        for a, b in zip(enc.encode(x), small.encode(x)):
            assert a.shape == b.shape
            worst = max(worst, np.max(np.abs(a.data - b.data)))
    assert worst < TOLERANCES["extraction"]
    assert small.num_parameters() < enc.num_parameters()


def test_extraction_with_open_gates_is_bit_identical(tiny_cfg):
    enc = _enc(tiny_cfg)
    small = extract_pruned(enc, {k: np.ones(n) for k, n in enc.gate_layout().items()})
    x = np.random.default_rng(0).normal(size=(2, 10, tiny_cfg.input_dim))
    for a, b in zip(enc.encode(x), small.encode(x)):
        assert np.array_equal(a.data, b.data)
    assert achieved_sparsity(enc, small) == 0.0


def test_extraction_bookkeeping(tiny_cfg):
    enc = _enc(tiny_cfg)
    gates = {k: np.ones(n) for k, n in enc.gate_layout().items()}
    n = tiny_cfg.ffn_dim
    gates[(0, "ffn1")][: n // 2] = 0.0
    small = extract_pruned(enc, gates)
    removed = enc.prunable_parameter_count() - small.prunable_parameter_count()
    assert removed == (n // 2) * enc.prunable_counts()[(0, "ffn1")]
    assert small.layers[0].ffn1.width == n - n // 2
    report = pruning_report(enc, small)
    assert "layer" in report and f"{n - n // 2}/{n}" in report


def test_extraction_refuses_headless_layer(tiny_cfg):
    enc = _enc(tiny_cfg)
    gates = {k: np.ones(n) for k, n in enc.gate_layout().items()}
    gates[(1, "head")][:] = 0.0
    with pytest.raises(StructureError, match="lower the target sparsity"):
        extract_pruned(enc, gates)


def test_extraction_requires_merged_lora(tiny_cfg):
    enc = _enc(tiny_cfg)
    enc.attach_lora_all(2, 4.0, np.random.default_rng(0))
    with pytest.raises(StructureError):
        extract_pruned(enc, GateSet.for_encoder(enc))


def test_prune_config_validation():
    with pytest.raises(ValueError):
        PruneConfig(target=1.0)
    with pytest.raises(ValueError):
        PruneConfig(l1="max")


SMALL = ConformerConfig(num_layers=2, model_dim=16, ffn_dim=32, num_heads=2, head_dim=8, conv_kernel=3,
                        dropout_rate=0.0, input_dim=8, max_rel_pos=8)


def _batches(seed=0):
    def fn(step):
        r = np.random.default_rng((seed, step))
        return r.normal(size=(2, 24, SMALL.input_dim))
    return fn


def test_zero_target_keeps_everything_and_freezes_teacher():
    teacher = _enc(SMALL, 3)
    before = encoder_checksum(teacher)
    student = teacher.clone()
    cfg = PruneConfig(target=0.0, steps=150, warmup_steps=20, lr_lambda=1.0)
    res = prune_train(teacher, student, _batches(), cfg, np.random.default_rng(0))
    assert encoder_checksum(teacher) == before
    assert all(np.all(z > 0) for z in res.gates.deterministic().values())
    assert res.sparsity == 0.0
    x = _batches(1)(0)
    final = distill_loss(teacher.encode(x), res.pruned.encode(x)).item()
    floor = distill_floor(teacher.encode(x))
    assert abs(final - floor) <= 0.05 * abs(floor)


def test_divergence_aborts():
    teacher = _enc(SMALL, 3)

    def bad(step):
        x = np.zeros((1, 8, SMALL.input_dim))
        x[0, 0, 0] = np.nan
        return x

    with pytest.raises(PruningError, match="diverged"):
        prune_train(teacher, teacher.clone(), bad, PruneConfig(steps=3), np.random.default_rng(0))
