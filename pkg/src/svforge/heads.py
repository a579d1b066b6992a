"""Speaker-embedding heads over an encoder layer stack.

Four configurations are covered: layer-wise weighted average followed by a
compact TDNN, plain MFA (concat + ASP + linear), Adapter+MFA, and the LoRA
variant which is Adapter+MFA with LoRA slots attached to the encoder.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .encoder import LayerStack, StructureError
from .nn import LayerNorm, Linear, Module, uniform_init
from .tensor import Tensor

EMBED_DIM = 256
ADAPTER_DIM = 128
ASP_EPS = 1e-6


def weighted_average(stack: LayerStack, w: Tensor) -> Tensor:
    """sum_i softmax(w)_i * h_i over the L+1 layers."""
    n = len(stack)
    if w.shape != (n,):
        raise StructureError(f"{w.shape[0] if w.ndim else 0} layer weights for a stack of {n} layers")
    p = T.softmax(w, axis=-1)
    h = T.stack(stack.features, axis=0)
    shape = h.shape[1:]
    out = T.matmul(p.reshape(1, n), h.reshape(n, -1))
    return out.reshape(shape)


class LayerAdapter(Module):
    """Per-layer linear(D->d') -> LayerNorm -> ReLU -> linear(d'->d')."""

    def __init__(self, num_layers: int, d_in: int, d_hidden: int, rng):
        self.proj = [Linear(d_in, d_hidden, rng) for _ in range(num_layers)]
        self.norm = [LayerNorm(d_hidden) for _ in range(num_layers)]
        self.out = [Linear(d_hidden, d_hidden, rng) for _ in range(num_layers)]

    @property
    def d_in(self) -> int:
        return self.proj[0].n_in

    @property
    def d_hidden(self) -> int:
        return self.out[0].n_out

    def forward(self, stack: LayerStack) -> LayerStack:
        return adapt(stack, self)


def adapt(stack: LayerStack, p: LayerAdapter) -> LayerStack:
    if len(stack) != len(p.proj):
        raise StructureError(f"adapter has {len(p.proj)} layers, stack has {len(stack)}")
    if stack.dim != p.d_in:
        raise StructureError(f"adapter expects dim {p.d_in}, stack has {stack.dim}")
    outs = []
    for h, lin1, ln, lin2 in zip(stack.features, p.proj, p.norm, p.out):
        outs.append(lin2(T.relu(ln(lin1(h)))))
    return LayerStack(outs)


class AttentiveStatsPool(Module):
    """Attention-weighted mean and std over frames.

    ``attention="shared"`` scores each frame with one scalar logit
    v . tanh(W x_t + b). ``"channel"`` produces one logit per channel
    (hidden -> C projection), the variant used for the large-scale parameter
    counts.
    """

    def __init__(self, channels: int, hidden: int, rng, attention: str = "shared"):
        self.W = T.parameter(uniform_init(rng, (channels, hidden), channels))
        self.b = T.parameter(np.zeros(hidden))
        if attention == "shared":
            self.v = T.parameter(uniform_init(rng, (hidden,), hidden))
        elif attention == "channel":
            self.v = T.parameter(uniform_init(rng, (hidden, channels), hidden))
            self.v_bias = T.parameter(np.zeros(channels))
        else:
            raise ValueError(f"unknown ASP attention {attention!r}")
        self.attention = attention
        self.eps = ASP_EPS

    @property
    def channels(self) -> int:
        return self.W.shape[0]

    def forward(self, x: Tensor) -> Tensor:
        return asp_pool(x, self)


def asp_pool(x: Tensor, asp: AttentiveStatsPool) -> Tensor:
    """(B, T, C) frames -> (B, 2C) [mean, std]."""
    x = T.as_tensor(x)
    if x.ndim == 2:
        x = x.reshape(1, *x.shape)
    B, Tn, C = x.shape
    if Tn < 1:
        raise ValueError("ASP needs at least one frame")
    h = T.tanh(T.matmul(x, asp.W) + asp.b)
    x2 = T.square(x)
    if asp.attention == "shared":
        e = T.matmul(h, asp.v.reshape(-1, 1)).reshape(B, 1, Tn)
        alpha = T.softmax(e, axis=-1)
        mu = T.matmul(alpha, x).reshape(B, C)
        m2 = T.matmul(alpha, x2).reshape(B, C)
    else:
        e = T.matmul(h, asp.v) + asp.v_bias
        alpha = T.softmax(e, axis=1)
        mu = T.sum(alpha * x, axis=1)
        m2 = T.sum(alpha * x2, axis=1)
    sigma = T.sqrt(T.clamp(m2 - T.square(mu), lo=asp.eps))
    return T.concat([mu, sigma], axis=-1)


def _concat_layers(stack: LayerStack) -> Tensor:
    dims = {h.shape for h in stack.features}
    if len(dims) != 1:
        raise StructureError(f"ragged stack for MFA concatenation: {sorted(dims)}")
    return T.concat(stack.features, axis=-1)


class MFAHead(Module):
    """Concat all layers channel-wise -> ASP -> linear to the embedding."""

    kind = "mfa"

    def __init__(self, num_layers: int, dim: int, rng, embed_dim: int = EMBED_DIM,
                 asp_hidden: int | None = None, attention: str = "channel"):
        c = num_layers * dim
        self.asp = AttentiveStatsPool(c, asp_hidden or dim, rng, attention)
        self.linear = Linear(2 * c, embed_dim, rng)

    def forward(self, stack: LayerStack) -> Tensor:
        return embed_mfa(stack, self)


def embed_mfa(stack: LayerStack, head) -> Tensor:
    x = _concat_layers(stack)
    if x.shape[-1] != head.asp.channels:
        raise StructureError(f"head expects {head.asp.channels} concatenated channels, got {x.shape[-1]}")
    return head.linear(asp_pool(x, head.asp))


class AdapterMFAHead(Module):
    kind = "adapter_mfa"

    def __init__(self, num_layers: int, dim: int, rng, adapter_dim: int = ADAPTER_DIM,
                 embed_dim: int = EMBED_DIM, asp_hidden: int | None = None, attention: str = "channel"):
        self.adapter = LayerAdapter(num_layers, dim, adapter_dim, rng)
        c = num_layers * adapter_dim
        self.asp = AttentiveStatsPool(c, asp_hidden or adapter_dim, rng, attention)
        self.linear = Linear(2 * c, embed_dim, rng)

    def forward(self, stack: LayerStack) -> Tensor:
        return embed_mfa(adapt(stack, self.adapter), self)


class TDNNBlock(Module):
    def __init__(self, channels: int, dilation: int, rng, kernel: int = 3):
        self.weight = T.parameter(uniform_init(rng, (kernel, channels, channels), kernel * channels))
        self.bias = T.parameter(np.zeros(channels))
        self.norm = LayerNorm(channels)
        self.dilation = dilation

    def forward(self, x: Tensor) -> Tensor:
        h = T.conv1d(x, self.weight, dilation=self.dilation) + self.bias
        return x + self.norm(T.relu(h))


class WeightedAverageHead(Module):
    """Softmax layer weights, then a 3-block dilated TDNN + ASP + linear.

    The TDNN is a small stand-in for an ECAPA-style speaker model.
    """

    kind = "weighted"

    def __init__(self, num_layers: int, dim: int, rng, channels: int = 128, embed_dim: int = EMBED_DIM,
                 asp_hidden: int = 128, dilations=(2, 3, 4)):
        self.layer_weights = T.parameter(np.zeros(num_layers))
        self.inp = Linear(dim, channels, rng)
        self.blocks = [TDNNBlock(channels, d, rng) for d in dilations]
        self.asp = AttentiveStatsPool(channels, asp_hidden, rng)
        self.linear = Linear(2 * channels, embed_dim, rng)

    def forward(self, stack: LayerStack) -> Tensor:
        return embed_weighted(stack, self.layer_weights, self)


def embed_weighted(stack: LayerStack, lw: Tensor, backend: WeightedAverageHead) -> Tensor:
    x = T.relu(backend.inp(weighted_average(stack, lw)))
    for blk in backend.blocks:
        x = blk(x)
    return backend.linear(asp_pool(x, backend.asp))


HEADS = {"weighted": WeightedAverageHead, "mfa": MFAHead, "adapter_mfa": AdapterMFAHead, "lora_adapter_mfa": AdapterMFAHead}


def build_head(kind: str, num_layers: int, dim: int, rng, **kw) -> Module:
    if kind not in HEADS:
        raise ValueError(f"unknown head {kind!r}; choose from {sorted(HEADS)}")
    return HEADS[kind](num_layers, dim, rng, **kw)


def head_param_count(kind: str, num_layers: int, dim: int, adapter_dim: int = ADAPTER_DIM,
                     embed_dim: int = EMBED_DIM, attention: str = "channel") -> int:
    """Closed-form head size for MFA-style heads; ``num_layers`` counts h_0..h_L."""

    def asp(c, hidden):
        n = c * hidden + hidden
        n += hidden * c + c if attention == "channel" else hidden
        return n

    if kind == "mfa":
        c = num_layers * dim
        return asp(c, dim) + 2 * c * embed_dim + embed_dim
    if kind in ("adapter_mfa", "lora_adapter_mfa"):
        per_layer = (dim * adapter_dim + adapter_dim) + 2 * adapter_dim + (adapter_dim * adapter_dim + adapter_dim)
        c = num_layers * adapter_dim
        return num_layers * per_layer + asp(c, adapter_dim) + 2 * c * embed_dim + embed_dim
    raise ValueError(f"no closed form for head {kind!r}")


def lora_param_count(num_conformer_layers: int, dim: int, r: int) -> int:
    """Query and value LoRA factors over every conformer layer."""
    return num_conformer_layers * 2 * (dim * r + r * dim)
