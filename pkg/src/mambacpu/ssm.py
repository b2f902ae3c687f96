"""State-space core: ZOH discretization, recurrent scan, convolution dual, selective variant.

The time-invariant (LTI) path works on plain numpy arrays and exists for
the scan/convolution duality checks and ablations. The selective path is
input-dependent (delta, B, C are linear functions of the input), built on
the autodiff graph, and is what the MaC blocks use.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError

# b_bar series branch: below this |delta * a| the direct quotient
# (exp(x) - 1)/a cancels catastrophically, so use the limit delta * b
SERIES_THRESHOLD = 1e-8


@dataclass(frozen=True)
class SsmParams:
    """Continuous-time diagonal system: h' = a*h + b*x, y = c.h (single channel)."""

    a: np.ndarray  # (N,), all < 0 for stability
    b: np.ndarray  # (N,)
    c: np.ndarray  # (N,)
    delta: float   # timescale, > 0

    def __post_init__(self):
        object.__setattr__(self, "a", np.asarray(self.a, dtype=np.float64))
        object.__setattr__(self, "b", np.asarray(self.b, dtype=np.float64))
        object.__setattr__(self, "c", np.asarray(self.c, dtype=np.float64))
        if np.any(self.a >= 0):
            raise ContractError("state diagonal must be strictly negative for stability")


@dataclass(frozen=True)
class DiscreteSsm:
    """ZOH-discretized system: h_{k+1} = a_bar*h_k + b_bar*x_k, y_{k+1} = c.h_{k+1}."""

    a_bar: np.ndarray  # (N,), in (0, 1) when a < 0 and delta > 0
    b_bar: np.ndarray  # (N,)
    c: np.ndarray      # (N,)


@dataclass(frozen=True)
class ConvKernel:
    """Impulse-response taps k_bar[j] = sum_n c[n] * a_bar[n]^j * b_bar[n]."""

    k_bar: np.ndarray  # (L,)


def discretize_zoh(params: SsmParams) -> DiscreteSsm:
    """Zero-order-hold discretization of a diagonal system.

    a_bar = exp(delta*a); b_bar = ((exp(delta*a) - 1)/a) * b, switching to
    the series limit b_bar = delta*b when |delta*a| < 1e-8.
    """
    if params.delta <= 0:
        raise ContractError(f"delta must be positive, got {params.delta}")
    za = params.delta * params.a
    a_bar = np.exp(za)
    small = np.abs(za) < SERIES_THRESHOLD
    safe_a = np.where(small, 1.0, params.a)
    b_bar = np.where(small, params.delta * params.b, np.expm1(za) / safe_a * params.b)
    return DiscreteSsm(a_bar=a_bar, b_bar=b_bar, c=params.c.copy())


def ssm_scan(d: DiscreteSsm, x: np.ndarray) -> np.ndarray:
    """Run the recurrence over a length-T input, starting from h = 0.

    Output index k holds y(t_{k+1}) = c . h(t_{k+1}), the first output that
    depends on x[k]; this alignment is what makes the scan equal the causal
    convolution with the kernel from :func:`ssm_conv_kernel`.
    """
    x = np.asarray(x, dtype=np.float64)
    T = x.shape[0]
    y = np.zeros(T)
    h = np.zeros_like(d.a_bar)
    for k in range(T):
        h = d.a_bar * h + d.b_bar * x[k]
        y[k] = float(d.c @ h)
    return y


def ssm_conv_kernel(d: DiscreteSsm, length: int) -> ConvKernel:
    """Taps k_bar[j] = c . (a_bar^j * b_bar), built by one running power per state."""
    if length < 1:
        raise ContractError(f"kernel length must be >= 1, got {length}")
    taps = np.zeros(length)
    p = d.c * d.b_bar
    for j in range(length):
        taps[j] = p.sum()
        p = p * d.a_bar
    return ConvKernel(k_bar=taps)


def apply_global_conv(x: np.ndarray, k: ConvKernel) -> np.ndarray:
    """Causal convolution y[t] = sum_{j<=t} k_bar[j] * x[t-j], truncated to len(x)."""
    x = np.asarray(x, dtype=np.float64)
    return np.convolve(x, k.k_bar)[: x.shape[0]]


# ---------------------------------------------------------------------------
# selective (input-dependent) variant

@dataclass
class SelectiveSsmParams:
    """Selection projections over D channels with N states per channel.

    The state diagonal is kept as a_log with a = -exp(a_log), so it stays
    negative no matter what training does to it. delta(x) goes through a
    softplus; B(x) and C(x) are affine so constant selection (zero weight
    matrices) degenerates to an LTI system.
    """

    a_log: Tensor    # (D, N)
    w_delta: Tensor  # (D, D)
    b_delta: Tensor  # (D,)
    w_b: Tensor      # (D, N)
    b_b: Tensor      # (N,)
    w_c: Tensor      # (D, N)
    b_c: Tensor      # (N,)


def init_selective(
    d_channels: int,
    n_state: int,
    rng: np.random.Generator,
    delta_range: tuple[float, float] = (0.01, 0.1),
) -> SelectiveSsmParams:
    """State init a_i = -(i+1); softplus bias set so delta starts in delta_range."""
    a0 = np.tile(np.arange(1.0, n_state + 1.0), (d_channels, 1))
    lo, hi = delta_range
    # inverse softplus: softplus(log(e^y - 1)) = y
    target = rng.uniform(lo, hi, size=d_channels)
    b_delta = np.log(np.expm1(target))
    s = 1.0 / np.sqrt(d_channels)
    return SelectiveSsmParams(
        a_log=Tensor(np.log(a0), requires_grad=True),
        w_delta=Tensor(rng.uniform(-s, s, size=(d_channels, d_channels)), requires_grad=True),
        b_delta=Tensor(b_delta, requires_grad=True),
        w_b=Tensor(rng.uniform(-s, s, size=(d_channels, n_state)), requires_grad=True),
        b_b=Tensor(np.zeros(n_state), requires_grad=True),
        w_c=Tensor(rng.uniform(-s, s, size=(d_channels, n_state)), requires_grad=True),
        b_c=Tensor(np.zeros(n_state), requires_grad=True),
    )


def selective_ssm(x: Tensor, p: SelectiveSsmParams) -> Tensor:
    """Selective scan over a (T, D) sequence; differentiable end-to-end.

    Per position t: delta_t = softplus(x_t W_delta + b_delta), B_t = x_t W_b + b_b,
    C_t = x_t W_c + b_c; each step is ZOH-discretized with its own delta_t and
    fed to the shared recurrence.
    """
    T, D = x.shape
    N = p.a_log.shape[1]
    delta = ad.softplus(ad.add(ad.matmul(x, p.w_delta), p.b_delta))  # (T, D)
    b_sel = ad.add(ad.matmul(x, p.w_b), p.b_b)                       # (T, N)
    c_sel = ad.add(ad.matmul(x, p.w_c), p.b_c)                       # (T, N)
    a = ad.neg(ad.exp(p.a_log))                                      # (D, N)
    delta3 = ad.reshape(delta, (T, D, 1))
    za = ad.mul(delta3, a)                                           # (T, D, N)
    a_bar = ad.exp(za)
    b_bar = ad.mul(ad.mul(delta3, ad.phi_zoh(za)), ad.reshape(b_sel, (T, 1, N)))
    return ad.selective_scan(a_bar, b_bar, c_sel, x)
