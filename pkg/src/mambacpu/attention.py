"""Multi-head self-attention within feature groups and across pooled group tokens."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, SchemaError
from .mamba import rmsnorm

GROUPS = ("Char", "CPU", "Memory", "Other")


@dataclass
class AttentionLayerParams:
    """One pre-norm residual attention layer with H unshared heads.

    w_o starts at zero so the layer is the identity at initialization.
    """

    w_q: list[Tensor]  # H tensors of shape (D, d_k)
    w_k: list[Tensor]
    w_v: list[Tensor]
    w_o: Tensor        # (H*d_k, D), zero-initialized
    norm_gain: Tensor  # (D,)
    rms_eps: float = 1e-6


def init_attention_layer(d_model: int, n_heads: int, rng: np.random.Generator) -> AttentionLayerParams:
    if d_model % n_heads != 0:
        raise ConfigError(f"embedding width {d_model} not divisible by {n_heads} heads")
    d_k = d_model // n_heads
    s = 1.0 / np.sqrt(d_model)

    def heads():
        return [Tensor(rng.uniform(-s, s, size=(d_model, d_k)), requires_grad=True) for _ in range(n_heads)]

    return AttentionLayerParams(
        w_q=heads(),
        w_k=heads(),
        w_v=heads(),
        w_o=Tensor(np.zeros((n_heads * d_k, d_model)), requires_grad=True),
        norm_gain=Tensor(np.ones(d_model), requires_grad=True),
    )


def multi_head_self_attention(x: Tensor, p: AttentionLayerParams) -> tuple[Tensor, list[Tensor]]:
    """softmax(Q K^T / sqrt(d_k)) V per head, heads concatenated through w_o.

    Returns the (T, D) output and the H row-stochastic (T, T) weight matrices.
    """
    d_k = p.w_q[0].shape[1]
    scale = 1.0 / np.sqrt(d_k)
    heads = []
    weights = []
    for wq, wk, wv in zip(p.w_q, p.w_k, p.w_v):
        q = ad.matmul(x, wq)
        k = ad.matmul(x, wk)
        v = ad.matmul(x, wv)
        attn = ad.softmax_rows(ad.mul(ad.matmul(q, ad.transpose(k)), scale))
        weights.append(attn)
        heads.append(ad.matmul(attn, v))
    out = ad.matmul(concat_heads(heads), p.w_o)
    return out, weights


def concat_heads(heads: list[Tensor]) -> Tensor:
    return heads[0] if len(heads) == 1 else ad.concat(heads, axis=1)


def attention_layer(x: Tensor, p: AttentionLayerParams) -> tuple[Tensor, list[Tensor]]:
    """Pre-norm residual wrapper: x + MHSA(rmsnorm(x))."""
    out, weights = multi_head_self_attention(rmsnorm(x, p.norm_gain, p.rms_eps), p)
    return ad.add(x, out), weights


def partition_indices(groups_of: list[str]) -> dict[str, list[int]]:
    """Map group tag -> feature row indices, in feature order.

    `groups_of[i]` is the group tag of feature i; every feature must carry
    one of the four known tags.
    """
    part: dict[str, list[int]] = {}
    for i, g in enumerate(groups_of):
        if g not in GROUPS:
            raise SchemaError(f"feature {i} has unknown group {g!r}; expected one of {GROUPS}")
        part.setdefault(g, []).append(i)
    return part


def intra_group_attention(
    features: Tensor,
    partition: dict[str, list[int]],
    stacks: dict[str, list[AttentionLayerParams]],
) -> tuple[dict[str, Tensor], dict[str, list[list[Tensor]]]]:
    """Run each group's rows through its own stack of attention layers.

    Returns per-group outputs (shape F_g x D) and per-group, per-layer lists
    of head weight matrices (each F_g x F_g).
    """
    outputs: dict[str, Tensor] = {}
    weights: dict[str, list[list[Tensor]]] = {}
    for g in GROUPS:
        idx = partition.get(g)
        if not idx:
            continue
        sub = ad.gather_rows(features, idx)
        weights[g] = []
        for layer in stacks[g]:
            sub, w = attention_layer(sub, layer)
            weights[g].append(w)
        outputs[g] = sub
    return outputs, weights


def pool_groups(outputs: dict[str, Tensor]) -> Tensor:
    """Mean-pool each group's rows to one token; stack tokens in canonical group order."""
    pooled = [ad.mean(outputs[g], axis=0, keepdims=True) for g in GROUPS if g in outputs]
    return pooled[0] if len(pooled) == 1 else ad.concat(pooled, axis=0)


def inter_group_attention(
    outputs: dict[str, Tensor],
    layers: list[AttentionLayerParams],
) -> tuple[Tensor, list[list[Tensor]]]:
    """Self-attention over the pooled group tokens (one per present group)."""
    tokens = pool_groups(outputs)
    weights = []
    for layer in layers:
        tokens, w = attention_layer(tokens, layer)
        weights.append(w)
    return tokens, weights


def prediction_head(fused: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map from the flattened fused representation to the output vector."""
    flat = ad.reshape(fused, (1, fused.size))
    return ad.reshape(ad.add(ad.matmul(flat, w), b), (w.shape[1],))
