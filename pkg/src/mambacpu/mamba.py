"""The Mamba block: RMSNorm, expand, convolve, selective SSM, gate, project, residual."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .ssm import SelectiveSsmParams, init_selective


@dataclass
class MambaBlockParams:
    """Parameters for one block over width-D sequences with internal width S*D.

    out_proj starts at zero so a freshly initialized block is the identity
    map (the gated branch contributes nothing until training moves it).
    """

    rms_gain: Tensor     # (D,)
    in_proj: Tensor      # (D, S*D)
    conv_kernel: Tensor  # (W, S*D)
    ssm: SelectiveSsmParams
    out_proj: Tensor     # (S*D, D), zero-initialized
    rms_eps: float = 1e-6


def init_mamba_block(
    d_model: int,
    expansion: int,
    n_state: int,
    conv_width: int,
    rng: np.random.Generator,
) -> MambaBlockParams:
    inner = expansion * d_model
    s_in = 1.0 / np.sqrt(d_model)
    s_conv = 1.0 / np.sqrt(conv_width)
    return MambaBlockParams(
        rms_gain=Tensor(np.ones(d_model), requires_grad=True),
        in_proj=Tensor(rng.uniform(-s_in, s_in, size=(d_model, inner)), requires_grad=True),
        conv_kernel=Tensor(rng.uniform(-s_conv, s_conv, size=(conv_width, inner)), requires_grad=True),
        ssm=init_selective(inner, n_state, rng),
        out_proj=Tensor(np.zeros((inner, d_model)), requires_grad=True),
    )


def rmsnorm(x: Tensor, gain: Tensor, eps: float) -> Tensor:
    """y[t, d] = gain[d] * x[t, d] / sqrt(mean_d(x[t, .]^2) + eps)."""
    ms = ad.mean(ad.mul(x, x), axis=1, keepdims=True)
    return ad.mul(ad.div(x, ad.sqrt(ad.add(ms, eps))), gain)


def mamba_forward(x: Tensor, p: MambaBlockParams) -> Tensor:
    """Apply the block to a (T, D) sequence; output has the same shape.

    Stages: normalize and expand to width S*D, causal depthwise convolution,
    selective SSM followed by SiLU, multiplicative gate by SiLU of the
    expanded input, project back to width D, add the residual. The gate is
    applied at the expanded width (before the output projection): the two
    branches it multiplies live at S*D, and the projection to D must come
    last for the residual sum to type-check.
    """
    from .ssm import selective_ssm

    x1 = ad.matmul(rmsnorm(x, p.rms_gain, p.rms_eps), p.in_proj)
    x2 = ad.causal_depthwise_conv(x1, p.conv_kernel)
    x3 = ad.silu(selective_ssm(x2, p.ssm))
    gated = ad.mul(x3, ad.silu(x1))
    return ad.add(ad.matmul(gated, p.out_proj), x)
