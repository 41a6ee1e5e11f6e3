"""Entity-level modality interaction: cross-modal attention, FFN and confidences.

All functions take a batch of entities, ``h`` of shape B x |M| x d, where each
entity's modality vectors form one attention sequence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .numkit import Tensor
from .numkit.init import xavier_uniform

VARIANTS = ("transformer", "FC", "WS", "AT", "TS")


class FusionWeights:
    def __init__(self, dim: int, heads: int, rng: np.random.Generator, ffn_dim: int | None = None,
                 ln_eps: float = 1e-5, prefix: str = "fusion"):
        if heads < 1 or dim % heads:
            raise ValueError(f"hidden dim {dim} is not divisible by {heads} heads")
        self.dim, self.heads, self.ln_eps = dim, heads, ln_eps
        self.head_dim = dim // heads
        ffn_dim = ffn_dim or 4 * dim
        p = lambda name, value: nk.parameter(value, name=f"{prefix}.{name}")
        # per-head W_q^(i) are the column blocks of w_q
        self.w_q = p("w_q", xavier_uniform(rng, dim, dim))
        self.w_k = p("w_k", xavier_uniform(rng, dim, dim))
        self.w_v = p("w_v", xavier_uniform(rng, dim, dim))
        self.w_o = p("w_o", xavier_uniform(rng, dim, dim))
        self.ln1_gain, self.ln1_bias = p("ln1.gain", np.ones(dim)), p("ln1.bias", np.zeros(dim))
        self.w_1 = p("ffn.w1", xavier_uniform(rng, dim, ffn_dim))
        self.b_1 = p("ffn.b1", np.zeros(ffn_dim))
        self.w_2 = p("ffn.w2", xavier_uniform(rng, ffn_dim, dim))
        self.b_2 = p("ffn.b2", np.zeros(dim))
        self.ln2_gain, self.ln2_bias = p("ln2.gain", np.ones(dim)), p("ln2.bias", np.zeros(dim))

    def parameters(self) -> dict[str, Tensor]:
        return {t.name: t for t in vars(self).values() if isinstance(t, Tensor)}


@dataclass
class FusionOutput:
    hidden: Tensor        # B x |M| x d, the fused h-bar per modality
    attention: Tensor     # B x heads x |M| x |M|
    confidence: Tensor    # B x |M|


def _batched(h) -> tuple[Tensor, bool]:
    h = nk.as_tensor(h)
    if h.ndim == 2:
        return h.reshape(1, *h.shape), True
    if h.ndim != 3:
        raise ValueError(f"fusion input must be |M| x d or B x |M| x d, got {h.shape}")
    return h, False


def mhca(h, w: FusionWeights) -> tuple[Tensor, Tensor]:
    """Multi-head attention across each entity's modality vectors.

    Returns the W_o-projected head concatenation (B x |M| x d) and the
    attention weights (B x heads x |M| x |M|).
    """
    h, single = _batched(h)
    b, m, d = h.shape
    if d != w.dim:
        raise ValueError(f"mhca: input dim {d} differs from weight dim {w.dim}")
    if m < 1:
        raise ValueError("mhca needs at least one modality")

    def split(x):
        return nk.transpose(x.reshape(b, m, w.heads, w.head_dim), (0, 2, 1, 3))

    q, k, v = split(h @ w.w_q), split(h @ w.w_k), split(h @ w.w_v)
    beta = nk.softmax(nk.matmul(q, nk.swapaxes(k, -1, -2)) / math.sqrt(w.head_dim), axis=-1)
    heads = nk.transpose(nk.matmul(beta, v), (0, 2, 1, 3)).reshape(b, m, d)
    out = heads @ w.w_o
    if single:
        return out.reshape(m, d), beta.reshape(w.heads, m, m)
    return out, beta


def confidence(beta) -> Tensor:
    """Per-modality confidence from attention ``beta`` (... x heads x |M| x |M|).

    The mass of modality m is the attention it receives, summed over heads and
    query modalities (every attention row sums to 1, so row sums would carry no
    signal). Masses are scaled by 1/sqrt(|M| * heads) and softmax-normalized.
    """
    beta = nk.as_tensor(beta)
    heads, m = beta.shape[-3], beta.shape[-1]
    mass = nk.tsum(nk.tsum(beta, axis=-3), axis=-2)   # ... x |M|, indexed by key modality
    return nk.softmax(mass / math.sqrt(m * heads), axis=-1)


def fuse(h, w: FusionWeights) -> FusionOutput:
    """Attention block with residual + LayerNorm, then FFN with residual + LayerNorm."""
    h, single = _batched(h)
    attended, beta = mhca(h, w)
    hbar = nk.layer_norm(attended + h, w.ln_eps) * w.ln1_gain + w.ln1_bias
    ffn = nk.relu(hbar @ w.w_1 + w.b_1) @ w.w_2 + w.b_2
    hbar = nk.layer_norm(ffn + hbar, w.ln_eps) * w.ln2_gain + w.ln2_bias
    conf = confidence(beta)
    if single:
        m, d = h.shape[1:]
        return FusionOutput(hbar.reshape(m, d), beta.reshape(w.heads, m, m), conf.reshape(m))
    return FusionOutput(hbar, beta, conf)


class VariantParams:
    """Parameters for the non-transformer fusion baselines."""

    def __init__(self, kind: str, num_modalities: int, dim: int, rng: np.random.Generator,
                 heads: int = 1, ffn_dim: int | None = None, prefix: str = "variant"):
        if kind not in VARIANTS[1:]:
            raise ValueError(f"unknown fusion variant {kind!r}")
        self.kind = kind
        p = lambda name, value: nk.parameter(value, name=f"{prefix}.{name}")
        self.tensors: dict[str, Tensor] = {}
        self.transformer: FusionWeights | None = None
        if kind == "FC":
            self.weight = p("fc.weight", xavier_uniform(rng, num_modalities * dim, dim))
            self.bias = p("fc.bias", np.zeros(dim))
            self.tensors = {t.name: t for t in (self.weight, self.bias)}
        elif kind == "WS":
            self.logits = p("ws.logits", np.zeros(num_modalities))
            self.tensors = {self.logits.name: self.logits}
        elif kind == "AT":
            self.proj = p("at.proj", xavier_uniform(rng, dim, dim))
            self.proj_bias = p("at.bias", np.zeros(dim))
            self.score = p("at.score", xavier_uniform(rng, dim, 1))
            self.tensors = {t.name: t for t in (self.proj, self.proj_bias, self.score)}
        else:
            self.transformer = FusionWeights(dim, heads, rng, ffn_dim, prefix=f"{prefix}.ts")

    def parameters(self) -> dict[str, Tensor]:
        if self.transformer is not None:
            return self.transformer.parameters()
        return dict(self.tensors)


def fuse_variant(h, kind: str, params: VariantParams) -> Tensor:
    """Collapse each entity's modality vectors to one d-vector with a baseline fuser.

    FC: concatenation then a linear map; WS: global softmax weights; AT: per-entity
    attention scores from a tanh scoring net; TS: transformer confidences weighting
    the fused vectors.
    """
    if kind != params.kind:
        raise ValueError(f"variant parameters are for {params.kind!r}, not {kind!r}")
    h, single = _batched(h)
    b, m, d = h.shape
    if kind == "FC":
        out = h.reshape(b, m * d) @ params.weight + params.bias
    elif kind == "WS":
        weights = nk.softmax(params.logits)
        out = nk.tsum(h * weights.reshape(1, m, 1), axis=1)
    elif kind == "AT":
        scores = nk.tanh(h @ params.proj + params.proj_bias) @ params.score   # B x M x 1
        a = nk.softmax(scores.reshape(b, m), axis=-1)
        out = nk.tsum(h * a.reshape(b, m, 1), axis=1)
    elif kind == "TS":
        fused = fuse(h, params.transformer)
        out = nk.tsum(fused.hidden * fused.confidence.reshape(b, m, 1), axis=1)
    else:
        raise ValueError(f"unknown fusion variant {kind!r}")
    return out.reshape(d) if single else out
