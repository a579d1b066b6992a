"""Distillation-guided structured pruning with Hard Concrete gates.

Gates sit on attention heads, FFN intermediate units (both macaron FFNs) and
depthwise-conv channels. The stretch interval is [LOW, HIGH] = [-0.1, 1.1]
with temperature BETA = 2/3.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .encoder import GATE_KINDS, ConformerEncoder, StructureError
from .losses import distill_loss, distill_floor
from .nn import Module
from .tensor import Tensor
from .training import AdamW

log = logging.getLogger(__name__)

BETA = 2.0 / 3.0
LOW = -0.1
HIGH = 1.1
# log(-LOW / HIGH) appearing in the open-probability
LOG_RATIO = math.log(-LOW / HIGH)

KIND_NAMES = {"head": "attention-head", "ffn1": "ffn-unit", "ffn2": "ffn-unit", "conv": "conv-channel"}


class PruningError(RuntimeError):
    pass


def sample_gate(log_alpha, rng: np.random.Generator, return_raw: bool = False):
    """Reparameterised Hard Concrete draw; differentiable in ``log_alpha``."""
    la = T.as_tensor(log_alpha)
    u = rng.uniform(1e-12, 1.0 - 1e-12, size=la.shape)
    noise = np.log(u) - np.log1p(-u)
    s = T.sigmoid(T.scale(la + noise, c=1.0 / BETA))
    raw = T.scale(s, c=HIGH - LOW) + LOW
    z = T.clamp(raw, lo=0.0, hi=1.0)
    return (z, raw) if return_raw else z


def gate_open_prob(log_alpha):
    """P(z > 0) = sigmoid(log_alpha - beta * log(-low / high))."""
    return T.sigmoid(T.as_tensor(log_alpha) - BETA * LOG_RATIO)


def deterministic_gate(log_alpha):
    """Evaluation-time gate: clamp(sigmoid(log_alpha) * (high - low) + low, 0, 1)."""
    s = T.sigmoid(T.as_tensor(log_alpha))
    return T.clamp(T.scale(s, c=HIGH - LOW) + LOW, lo=0.0, hi=1.0)


@dataclass(frozen=True)
class Group:
    group_id: int
    kind: str  # attention-head / ffn-unit / conv-channel
    slot: str  # head / ffn1 / ffn2 / conv
    layer: int
    index: int
    param_count: int


class GateSet(Module):
    """One learnable log_alpha per prunable structure, stored per (layer, slot) vector."""

    def __init__(self, layout: dict[tuple[int, str], int], counts: dict[tuple[int, str], int],
                 init: float = 2.0, rng: np.random.Generator | None = None, init_std: float = 0.01):
        self.log_alpha = {}
        self._keys = sorted(layout, key=lambda k: (k[0], GATE_KINDS.index(k[1])))
        self._counts = {k: int(counts[k]) for k in self._keys}
        for k in self._keys:
            n = layout[k]
            v = np.full(n, float(init))
            if rng is not None and init_std > 0:
                v = v + rng.normal(0.0, init_std, size=n)
            self.log_alpha[f"{k[0]}.{k[1]}"] = T.parameter(v)
        groups = []
        for k in self._keys:
            for j in range(layout[k]):
                groups.append(Group(len(groups), KIND_NAMES[k[1]], k[1], k[0], j, self._counts[k]))
        self.groups = groups

    @classmethod
    def for_encoder(cls, enc: ConformerEncoder, init: float = 2.0, rng=None, init_std: float = 0.01) -> "GateSet":
        return cls(enc.gate_layout(), enc.prunable_counts(), init, rng, init_std)

    def _la(self, key) -> Tensor:
        return self.log_alpha[f"{key[0]}.{key[1]}"]

    def layout(self) -> dict[tuple[int, str], int]:
        return {k: self._la(k).shape[0] for k in self._keys}

    @property
    def total_count(self) -> int:
        return int(sum(g.param_count for g in self.groups))

    def group_counts(self) -> np.ndarray:
        return np.array([g.param_count for g in self.groups], dtype=np.float64)

    def flat_log_alpha(self) -> np.ndarray:
        return np.concatenate([self._la(k).data for k in self._keys])

    def values(self, mode: str, rng: np.random.Generator | None = None) -> dict:
        out = {}
        for k in self._keys:
            la = self._la(k)
            if mode == "sampled":
                if rng is None:
                    raise ValueError("sampled gates need an rng")
                out[k] = sample_gate(la, rng)
            elif mode == "deterministic":
                out[k] = deterministic_gate(la)
            else:
                raise ValueError(f"unknown gate mode {mode!r}")
        return out

    def deterministic(self) -> dict:
        with T.no_grad():
            return {k: v.data.copy() for k, v in self.values("deterministic").items()}

    def expected_l0(self) -> Tensor:
        total = None
        for k in self._keys:
            term = T.scale(T.sum(gate_open_prob(self._la(k))), c=float(self._counts[k]))
            total = term if total is None else total + term
        return total

    def expected_sparsity(self) -> Tensor:
        return 1.0 - T.scale(self.expected_l0(), c=1.0 / self.total_count)

    def tensors(self) -> dict[str, np.ndarray]:
        return {"gate." + n: p.data.copy() for n, p in self.named_parameters()}


def expected_l0(g: GateSet) -> Tensor:
    return g.expected_l0()


class SparsityController(Module):
    """Lagrange multipliers and the linearly ramped sparsity target."""

    def __init__(self, target: float, warmup_steps: int = 500):
        if not 0.0 <= target < 1.0:
            raise ValueError("target sparsity must be in [0, 1)")
        self.lambda1 = T.parameter(np.zeros(()))
        self.lambda2 = T.parameter(np.zeros(()))
        self.target = float(target)
        self.warmup_steps = int(warmup_steps)

    def target_at(self, step: int) -> float:
        if self.warmup_steps <= 0:
            return self.target
        return self.target * min(step / self.warmup_steps, 1.0)


def lagrangian_penalty(c: SparsityController, g: GateSet, step: int | None = None) -> Tensor:
    """lambda1 * (s - t) + lambda2 * (s - t)^2 with s the expected sparsity."""
    t_hat = c.target if step is None else c.target_at(step)
    gap = g.expected_sparsity() - t_hat
    return c.lambda1 * gap + c.lambda2 * T.square(gap)


# -- extraction -------------------------------------------------------------------

def extract_pruned(encoder: ConformerEncoder, g: GateSet | dict) -> ConformerEncoder:
    """Physically remove closed structures and fold surviving gate values into weights.

    ``g`` is a GateSet (deterministic gates are computed) or a precomputed
    {(layer, slot): array} mapping.
    """
    if encoder.has_lora():
        raise StructureError("merge LoRA before extracting a pruned model")
    z = g.deterministic() if isinstance(g, GateSet) else {k: np.asarray(v, dtype=np.float64) for k, v in g.items()}
    if set(z) != set(encoder.gate_layout()):
        raise StructureError("gate layout does not match encoder")
    out = copy.deepcopy(encoder)
    out.apply_gates(None)
    for i, layer in enumerate(out.layers):
        zh = z[(i, "head")]
        keep = np.flatnonzero(zh > 0)
        if keep.size == 0:
            raise StructureError(f"layer {i} would lose every attention head; lower the target sparsity "
                                 f"or exempt this layer from head pruning")
        att = layer.mhsa
        dh = att.head_dim
        cols = (keep[:, None] * dh + np.arange(dh)[None, :]).reshape(-1)
        for lin in (att.wq, att.wk, att.wv):
            lin.weight.data = lin.weight.data[:, cols].copy()
            lin.bias.data = lin.bias.data[cols].copy()
        att.wo.weight.data = att.wo.weight.data[cols] * np.repeat(zh[keep], dh)[:, None]
        att.rel_bias.data = att.rel_bias.data[keep].copy()
        for slot, ffn in (("ffn1", layer.ffn1), ("ffn2", layer.ffn2)):
            zf = z[(i, slot)]
            k = np.flatnonzero(zf > 0)
            ffn.w1.weight.data = ffn.w1.weight.data[:, k].copy()
            ffn.w1.bias.data = ffn.w1.bias.data[k].copy()
            ffn.w2.weight.data = ffn.w2.weight.data[k] * zf[k][:, None]
        conv = layer.conv
        zc = z[(i, "conv")]
        k = np.flatnonzero(zc > 0)
        C = conv.channels
        both = np.concatenate([k, k + C])
        conv.pw1.weight.data = conv.pw1.weight.data[:, both].copy()
        conv.pw1.bias.data = conv.pw1.bias.data[both].copy()
        conv.dw_weight.data = conv.dw_weight.data[:, k].copy()
        conv.dw_bias.data = conv.dw_bias.data[k].copy()
        conv.pw2.weight.data = conv.pw2.weight.data[k] * zc[k][:, None]
    return out


def achieved_sparsity(original: ConformerEncoder, pruned: ConformerEncoder) -> float:
    return 1.0 - pruned.prunable_parameter_count() / original.prunable_parameter_count()


def pruning_report(original: ConformerEncoder, pruned: ConformerEncoder) -> str:
    """Per-layer retained heads / FFN units / conv channels as a text table."""
    before = original.structure_report()
    after = pruned.structure_report()
    lines = ["layer\theads\tffn1\tffn2\tconv"]
    for b, a in zip(before, after):
        cells = [f"{a[k]}/{b[k]} ({100.0 * a[k] / b[k]:.1f}%)" for k in GATE_KINDS]
        lines.append(f"{b['layer']}\t" + "\t".join(cells))
    lines.append(f"prunable params\t{pruned.prunable_parameter_count()}/{original.prunable_parameter_count()}")
    lines.append(f"achieved sparsity\t{achieved_sparsity(original, pruned):.4f}")
    return "\n".join(lines) + "\n"


# -- training loops -------------------------------------------------------------------

@dataclass
class PruneConfig:
    target: float = 0.5
    steps: int = 2000
    warmup_steps: int = 500
    lr_student: float = 2e-4
    lr_gates: float = 2e-2
    lr_lambda: float = 1.0
    init_log_alpha: float = 2.0
    post_distill_steps: int = 200
    l1: str = "mean"

    def __post_init__(self):
        if not 0.0 <= self.target < 1.0:
            raise ValueError(f"prune.target must lie in [0, 1), got {self.target}")
        if self.steps < 1 or self.warmup_steps < 0:
            raise ValueError("prune.steps must be >= 1 and prune.warmup_steps >= 0")
        if self.l1 not in ("mean", "sum"):
            raise ValueError("prune.l1 must be 'mean' or 'sum'")


@dataclass
class PruneResult:
    student: ConformerEncoder
    gates: GateSet
    controller: SparsityController
    history: list = field(default_factory=list)
    pruned: ConformerEncoder | None = None
    sparsity: float | None = None


def encoder_checksum(enc: ConformerEncoder) -> str:
    from .checkpoint import checksum

    return checksum(enc.state_dict())


def prune_train(teacher: ConformerEncoder, student: ConformerEncoder, batch_fn: Callable[[int], np.ndarray],
                cfg: PruneConfig, rng: np.random.Generator, extract: bool = True) -> PruneResult:
    """Minimise distillation + Lagrangian penalty over student weights and gates,
    maximise over the multipliers; then optionally extract the pruned model.

    ``batch_fn(step)`` returns a (B, T_in, 80) feature batch. The teacher is
    read only under no_grad and never modified.
    """
    teacher.eval()
    student.eval()
    for p in teacher.parameters():
        p.requires_grad = False
    student.requires_grad_(True)
    gates = GateSet.for_encoder(student, init=cfg.init_log_alpha, rng=rng)
    ctrl = SparsityController(cfg.target, cfg.warmup_steps)
    opt_s = AdamW(student.named_parameters(), cfg.lr_student, weight_decay=0.0)
    opt_g = AdamW(gates.named_parameters(), cfg.lr_gates, weight_decay=0.0)
    opt_l = AdamW(ctrl.named_parameters(), cfg.lr_lambda, weight_decay=0.0, maximize=True)
    student.apply_gates(gates, "sampled", rng)
    history = []
    for step in range(cfg.steps):
        feats = batch_fn(step)
        with T.no_grad():
            t_stack = teacher.encode(feats)
        s_stack = student.encode(feats)
        dl = distill_loss(t_stack, s_stack, l1=cfg.l1)
        pen = lagrangian_penalty(ctrl, gates, step)
        loss = dl + pen
        if not np.isfinite(loss.item()):
            raise PruningError(f"loss diverged at step {step}: distill={dl.item()} penalty={pen.item()} "
                               f"lambda1={ctrl.lambda1.item()} lambda2={ctrl.lambda2.item()}")
        for o in (opt_s, opt_g, opt_l):
            o.zero_grad()
        loss.backward()
        opt_s.step()
        opt_g.step()
        opt_l.step()
        if step % 50 == 0 or step == cfg.steps - 1:
            with T.no_grad():
                es = gates.expected_sparsity().item()
            history.append(dict(step=step, distill=dl.item(), floor=distill_floor(t_stack), penalty=pen.item(),
                                expected_sparsity=es, target=ctrl.target_at(step),
                                lambda1=ctrl.lambda1.item(), lambda2=ctrl.lambda2.item()))
    student.apply_gates(None)
    for p in student.parameters():
        p.requires_grad = False
    res = PruneResult(student, gates, ctrl, history)
    if extract:
        res.pruned = extract_pruned(student, gates)
        res.sparsity = achieved_sparsity(student, res.pruned)
    return res


def distill_train(teacher: ConformerEncoder, student: ConformerEncoder, batch_fn: Callable[[int], np.ndarray],
                  steps: int, lr: float = 2e-4, l1: str = "mean") -> list[float]:
    """Plain layer-wise distillation of ``student`` towards ``teacher``."""
    teacher.eval()
    student.eval()
    for p in teacher.parameters():
        p.requires_grad = False
    student.requires_grad_(True)
    opt = AdamW(student.named_parameters(), lr, weight_decay=0.0)
    losses = []
    for step in range(steps):
        feats = batch_fn(step)
        with T.no_grad():
            t_stack = teacher.encode(feats)
        loss = distill_loss(t_stack, student.encode(feats), l1=l1)
        if not np.isfinite(loss.item()):
            raise PruningError(f"distillation diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    for p in student.parameters():
        p.requires_grad = False
    return losses
