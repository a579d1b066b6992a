"""Toy Conformer encoder producing the full per-layer feature stack.

Frames are stored time-major: every layer output is a (B, T, D) tensor, so
one utterance's ``h_i`` is the transpose of the usual D x T matrix.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module, uniform_init
from .tensor import Tensor

log = logging.getLogger(__name__)

GATE_KINDS = ("head", "ffn1", "ffn2", "conv")


class StructureError(ValueError):
    """Raised when module structure (layouts, slots, sizes) is inconsistent."""


@dataclass
class ConformerConfig:
    num_layers: int = 4
    model_dim: int = 64
    ffn_dim: int = 256
    num_heads: int = 4
    head_dim: int = 16
    conv_kernel: int = 15
    dropout_rate: float = 0.1
    input_dim: int = 80
    subsample: int = 2
    max_rel_pos: int = 32

    def __post_init__(self):
        for name in ("num_layers", "model_dim", "ffn_dim", "num_heads", "head_dim", "conv_kernel", "input_dim", "subsample"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.num_heads * self.head_dim != self.model_dim:
            raise ValueError("num_heads * head_dim must equal model_dim")
        if self.conv_kernel % 2 == 0:
            raise ValueError("conv_kernel must be odd")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")


@dataclass
class LayerStack:
    """Per-layer frame features h_0..h_L, each (B, T, D)."""

    features: list

    def __post_init__(self):
        if not self.features:
            raise StructureError("empty layer stack")
        ref = self.features[0].shape
        for h in self.features[1:]:
            if h.shape[:-1] != ref[:-1]:
                raise StructureError(f"ragged layer stack: {ref} vs {h.shape}")

    def __len__(self):
        return len(self.features)

    def __getitem__(self, i):
        return self.features[i]

    def __iter__(self):
        return iter(self.features)

    @property
    def num_frames(self) -> int:
        return self.features[0].shape[-2]

    @property
    def dim(self) -> int:
        return self.features[0].shape[-1]

    def matrix(self, layer: int, item: int = 0) -> np.ndarray:
        """D x T view of one utterance's layer output."""
        return self.features[layer].data[item].T


class LoRA(Module):
    """Low-rank update scale * A @ B added to a frozen (in, out) weight."""

    def __init__(self, n_in: int, n_out: int, r: int, alpha: float, rng: np.random.Generator):
        if r < 1:
            raise ValueError("LoRA rank must be >= 1")
        self.A = T.parameter(rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, r)))
        self.B = T.parameter(np.zeros((r, n_out)))
        self.r = r
        self.alpha = float(alpha)

    @property
    def scale(self) -> float:
        return self.alpha / self.r

    def delta(self) -> np.ndarray:
        return self.scale * (self.A.data @ self.B.data)

    def forward(self, x: Tensor) -> Tensor:
        return T.scale(T.matmul(T.matmul(x, self.A), self.B), c=self.scale)


class FeedForward(Module):
    """Linear -> swish -> (unit gate) -> dropout -> linear."""

    def __init__(self, d: int, f: int, rng):
        self.w1 = Linear(d, f, rng)
        self.w2 = Linear(f, d, rng)
        self._gate = None

    @property
    def width(self) -> int:
        return self.w1.n_out

    def forward(self, x, rng=None, p=0.0):
        h = T.swish(self.w1(x))
        if self._gate is not None:
            h = h * self._gate
        h = T.dropout(h, p, rng)
        return self.w2(h)


class SelfAttention(Module):
    """Multi-head self-attention with learned relative-position logit bias."""

    def __init__(self, d: int, heads: int, head_dim: int, max_rel: int, rng):
        self.wq = Linear(d, heads * head_dim, rng)
        self.wk = Linear(d, heads * head_dim, rng)
        self.wv = Linear(d, heads * head_dim, rng)
        self.wo = Linear(heads * head_dim, d, rng)
        self.rel_bias = T.parameter(np.zeros((heads, 2 * max_rel + 1)))
        self.head_dim = head_dim
        self.max_rel = max_rel
        self.lora = {}
        self._gate = None

    @property
    def num_heads(self) -> int:
        return self.wq.n_out // self.head_dim

    def _proj(self, name: str, x):
        lin = getattr(self, {"query": "wq", "key": "wk", "value": "wv"}[name])
        y = lin(x)
        if name in self.lora:
            y = y + self.lora[name](x)
        return y

    def _split(self, x, B, Tn):
        return x.reshape(B, Tn, self.num_heads, self.head_dim).transpose(0, 2, 1, 3)

    def forward(self, x, rng=None, p=0.0):
        B, Tn, _ = x.shape
        H = self.num_heads
        if H == 0:
            raise StructureError("attention layer has no heads left")
        q = self._split(self._proj("query", x), B, Tn)
        k = self._split(self._proj("key", x), B, Tn)
        v = self._split(self._proj("value", x), B, Tn)
        logits = T.scale(T.matmul(q, k.swapaxes(-1, -2)), c=1.0 / np.sqrt(self.head_dim))
        rel = np.arange(Tn)[None, :] - np.arange(Tn)[:, None]
        idx = np.clip(rel, -self.max_rel, self.max_rel) + self.max_rel
        logits = logits + T.take(self.rel_bias, indices=idx, axis=1)  # (H, T, T)
        att = T.dropout(T.softmax(logits, axis=-1), p, rng)
        ctx = T.matmul(att, v)  # (B, H, T, dh)
        if self._gate is not None:
            g = T.expand(self._gate.reshape(H, 1, 1), shape=(H, Tn, self.head_dim))
            ctx = ctx * g
        ctx = ctx.transpose(0, 2, 1, 3).reshape(B, Tn, H * self.head_dim)
        return self.wo(ctx)


class ConvModule(Module):
    """Pointwise (2C) -> GLU -> depthwise -> swish -> (channel gate) -> pointwise."""

    def __init__(self, d: int, channels: int, kernel: int, rng):
        self.pw1 = Linear(d, 2 * channels, rng)
        self.dw_weight = T.parameter(uniform_init(rng, (kernel, channels), kernel))
        self.dw_bias = T.parameter(np.zeros(channels))
        self.pw2 = Linear(channels, d, rng)
        self._gate = None

    @property
    def channels(self) -> int:
        return self.dw_weight.shape[1]

    def forward(self, x, rng=None, p=0.0):
        h = T.glu(self.pw1(x), axis=-1)
        h = T.depthwise_conv1d(h, self.dw_weight) + self.dw_bias
        h = T.swish(h)
        if self._gate is not None:
            h = h * self._gate
        h = T.dropout(h, p, rng)
        return self.pw2(h)


class ConformerLayer(Module):
    """Macaron block: x + FFN/2, + MHSA, + Conv, + FFN/2, then LayerNorm (pre-norm residuals)."""

    def __init__(self, cfg: ConformerConfig, rng):
        d = cfg.model_dim
        self.ln_ffn1 = LayerNorm(d)
        self.ffn1 = FeedForward(d, cfg.ffn_dim, rng)
        self.ln_att = LayerNorm(d)
        self.mhsa = SelfAttention(d, cfg.num_heads, cfg.head_dim, cfg.max_rel_pos, rng)
        self.ln_conv = LayerNorm(d)
        self.conv = ConvModule(d, d, cfg.conv_kernel, rng)
        self.ln_ffn2 = LayerNorm(d)
        self.ffn2 = FeedForward(d, cfg.ffn_dim, rng)
        self.ln_out = LayerNorm(d)

    def forward(self, x, rng=None, p=0.0):
        x = x + T.scale(T.dropout(self.ffn1(self.ln_ffn1(x), rng, p), p, rng), c=0.5)
        x = x + T.dropout(self.mhsa(self.ln_att(x), rng, p), p, rng)
        x = x + T.dropout(self.conv(self.ln_conv(x), rng, p), p, rng)
        x = x + T.scale(T.dropout(self.ffn2(self.ln_ffn2(x), rng, p), p, rng), c=0.5)
        return self.ln_out(x)

    def gate_sizes(self) -> dict[str, int]:
        return {"head": self.mhsa.num_heads, "ffn1": self.ffn1.width, "ffn2": self.ffn2.width, "conv": self.conv.channels}

    def set_gates(self, gates: dict | None):
        gates = gates or {}
        self.mhsa._gate = gates.get("head")
        self.ffn1._gate = gates.get("ffn1")
        self.ffn2._gate = gates.get("ffn2")
        self.conv._gate = gates.get("conv")


class ConformerEncoder(Module):
    def __init__(self, cfg: ConformerConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.input_proj = Linear(cfg.input_dim * cfg.subsample, cfg.model_dim, rng)
        self.layers = [ConformerLayer(cfg, rng) for _ in range(cfg.num_layers)]
        self._gate_source = None

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def output_frames(self, t_in: int) -> int:
        return t_in // self.cfg.subsample

    def encode(self, feats, rng: np.random.Generator | None = None) -> LayerStack:
        """Return h_0 (input projection) and every layer output.

        ``feats`` is (T_in, 80) or (B, T_in, 80). Dropout is active only when the
        encoder is in training mode and an rng is supplied.
        """
        x = feats if isinstance(feats, Tensor) else Tensor(np.asarray(feats, dtype=T.DTYPE))
        if x.ndim == 2:
            x = x.reshape(1, *x.shape)
        B, t_in, f = x.shape
        if f != self.cfg.input_dim:
            raise StructureError(f"expected {self.cfg.input_dim}-dim features, got {f}")
        s = self.cfg.subsample
        t_out = t_in // s
        if t_out < 1:
            raise ValueError(f"{t_in} input frames leave no frames after {s}x subsampling")
        if t_in != t_out * s:
            x = x[:, : t_out * s]
        x = x.reshape(B, t_out, s * f)
        p = self.cfg.dropout_rate if (self.training and rng is not None) else 0.0
        drng = rng if p > 0 else None
        self._refresh_gates(rng)
        h = self.input_proj(x)
        feats_out = [h]
        for layer in self.layers:
            h = layer(h, drng, p)
            feats_out.append(h)
        return LayerStack(feats_out)

    __call__ = encode

    # -- LoRA -------------------------------------------------------------------------
    def attach_lora(self, layer_index: int, target: str, r: int, alpha: float, init_rng: np.random.Generator):
        if target not in ("query", "value"):
            raise ValueError("LoRA target must be 'query' or 'value'")
        att = self.layers[layer_index].mhsa
        if target in att.lora:
            raise StructureError(f"LoRA already attached to layer {layer_index} {target}")
        lin = att.wq if target == "query" else att.wv
        att.lora[target] = LoRA(lin.n_in, lin.n_out, r, alpha, init_rng)
        lin.weight.requires_grad = False

    def attach_lora_all(self, r: int, alpha: float, rng: np.random.Generator):
        for i in range(self.num_layers):
            for target in ("query", "value"):
                self.attach_lora(i, target, r, alpha, rng)

    def has_lora(self) -> bool:
        return any(layer.mhsa.lora for layer in self.layers)

    def merge_lora(self):
        """Fold every attached LoRA update into its base weight and drop the slots."""
        if not self.has_lora():
            log.info("merge_lora: no LoRA slots attached, nothing to do")
            return
        for layer in self.layers:
            att = layer.mhsa
            for target, lora in att.lora.items():
                lin = att.wq if target == "query" else att.wv
                lin.weight.data = lin.weight.data + lora.delta()
                lin.weight.requires_grad = True
            att.lora = {}

    # -- gates --------------------------------------------------------------------------
    def gate_layout(self) -> dict[tuple[int, str], int]:
        return {(i, k): n for i, layer in enumerate(self.layers) for k, n in layer.gate_sizes().items()}

    def apply_gates(self, gates, mode: str = "deterministic", rng: np.random.Generator | None = None):
        """Attach a gate source consulted on every forward.

        ``gates`` is either a GateSet-like object with ``layout()`` and
        ``values(mode, rng)`` or a plain {(layer, kind): array} mapping.
        Passing None removes all gates.
        """
        if gates is None:
            self._gate_source = None
            for layer in self.layers:
                layer.set_gates(None)
            return
        if mode not in ("sampled", "deterministic"):
            raise ValueError("mode must be 'sampled' or 'deterministic'")
        layout = {k: np.size(v) for k, v in gates.items()} if isinstance(gates, dict) else gates.layout()
        own = self.gate_layout()
        if layout != own:
            raise StructureError(f"gate layout mismatch: {sorted(layout.items())} vs encoder {sorted(own.items())}")
        self._gate_source = (gates, mode, rng)

    def _refresh_gates(self, rng=None):
        if self._gate_source is None:
            return
        gates, mode, grng = self._gate_source
        if not isinstance(gates, dict):
            vals = gates.values(mode, grng if grng is not None else rng)
        else:
            vals = {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in gates.items()}
        for i, layer in enumerate(self.layers):
            layer.set_gates({k: vals[(i, k)] for k in GATE_KINDS if (i, k) in vals})

    # -- parameter groups ------------------------------------------------------------------
    def prunable_counts(self) -> dict[tuple[int, str], int]:
        """Parameters removed together with one structure of each kind, per layer."""
        out = {}
        for i, layer in enumerate(self.layers):
            att = layer.mhsa
            d, dh = att.wq.n_in, att.head_dim
            out[(i, "head")] = 3 * (d * dh + dh) + dh * d + att.rel_bias.shape[1]
            for k, ffn in (("ffn1", layer.ffn1), ("ffn2", layer.ffn2)):
                out[(i, k)] = 2 * ffn.w1.n_in + 1
            conv = layer.conv
            out[(i, "conv")] = 2 * (conv.pw1.n_in + 1) + conv.dw_weight.shape[0] + 1 + conv.pw2.n_out
        return out

    def prunable_parameter_count(self) -> int:
        """Size of every tensor slice that belongs to a prunable structure."""
        total = 0
        for layer in self.layers:
            att = layer.mhsa
            for lin in (att.wq, att.wk, att.wv):
                total += lin.weight.size + lin.bias.size
            total += att.wo.weight.size + att.rel_bias.size
            for ffn in (layer.ffn1, layer.ffn2):
                total += ffn.w1.weight.size + ffn.w1.bias.size + ffn.w2.weight.size
            conv = layer.conv
            total += conv.pw1.weight.size + conv.pw1.bias.size + conv.dw_weight.size + conv.dw_bias.size + conv.pw2.weight.size
        return int(total)

    def structure_report(self) -> list[dict]:
        return [dict(layer=i, **layer.gate_sizes()) for i, layer in enumerate(self.layers)]
