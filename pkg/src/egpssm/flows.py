"""Element-wise normalizing flows that warp the shared GP output.

Two families are provided:

* SAL (sinh-arcsinh-linear) layers ``alpha * sinh(phi * asinh(u) - gamma) + beta``
  stacked ``J`` times, applied in order ``j = 0 .. J-1``;
* the affine map ``alpha * u + beta``.

:class:`FlowBank` holds the flows of all ``d_x`` output dimensions as stacked
parameter tensors so that every dimension is evaluated in one batched
operation.  :class:`FlowStack` is the per-dimension value object used by the
scalar functions :func:`flow_forward`, :func:`flow_inverse` and
:func:`flow_logdet`.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import torch
from torch import nn

from .numerics import DTYPE, as_tensor


class FlowKind(str, Enum):
    SAL = "sal"
    LINEAR = "linear"

    @classmethod
    def parse(cls, name) -> "FlowKind":
        if isinstance(name, FlowKind):
            return name
        key = str(name).strip().lower()
        if key in ("l", "lin", "linear", "affine"):
            return cls.LINEAR
        if key in ("sal", "sinh-arcsinh", "sinh_arcsinh"):
            return cls.SAL
        raise ValueError(f"unknown flow kind {name!r}")


# ---------------------------------------------------------------------------
# elementwise maths (broadcasting over tensors)
# ---------------------------------------------------------------------------


def sal_forward(u, alpha, beta, gamma, phi):
    return alpha * torch.sinh(phi * torch.asinh(u) - gamma) + beta


def sal_inverse(y, alpha, beta, gamma, phi):
    return torch.sinh((torch.asinh((y - beta) / alpha) + gamma) / phi)


def sal_logderiv(u, alpha, beta, gamma, phi):
    """log |d/du sal_forward|; ``alpha`` and ``phi`` are positive."""
    w = phi * torch.asinh(u) - gamma
    # log cosh(w) = |w| + log1p(exp(-2|w|)) - log 2, stable for large |w|
    aw = torch.abs(w)
    log_cosh = aw + torch.log1p(torch.exp(-2.0 * aw)) - torch.log(torch.tensor(2.0, dtype=w.dtype))
    return torch.log(alpha) + torch.log(phi) + log_cosh - 0.5 * torch.log1p(u * u)


# ---------------------------------------------------------------------------
# per-dimension value objects
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SalLayerParams:
    alpha: float
    beta: float
    gamma: float
    phi: float

    def __post_init__(self):
        if not (self.alpha > 0 and self.phi > 0):
            raise ValueError("SAL layers need alpha > 0 and phi > 0")


@dataclass(frozen=True)
class FlowStack:
    """Flow of one output dimension.

    ``layers`` is used for SAL stacks, ``(alpha, beta)`` for the linear flow.
    Linear ``alpha`` may be any real number; it must be non-zero to invert.
    """

    kind: FlowKind
    layers: tuple = ()
    alpha: float = 1.0
    beta: float = 0.0
    dim_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", FlowKind.parse(self.kind))
        if self.kind is FlowKind.SAL:
            if len(self.layers) < 1:
                raise ValueError("a SAL stack needs at least one layer")
            object.__setattr__(self, "layers", tuple(self.layers))

    @classmethod
    def sal(cls, layers: Sequence[SalLayerParams], dim_index: int = 0) -> "FlowStack":
        return cls(kind=FlowKind.SAL, layers=tuple(layers), dim_index=dim_index)

    @classmethod
    def linear(cls, alpha: float, beta: float, dim_index: int = 0) -> "FlowStack":
        return cls(kind=FlowKind.LINEAR, alpha=alpha, beta=beta, dim_index=dim_index)

    @property
    def num_params(self) -> int:
        return 4 * len(self.layers) if self.kind is FlowKind.SAL else 2


def _layer_tensors(layer: SalLayerParams):
    return tuple(torch.tensor(v, dtype=DTYPE) for v in (layer.alpha, layer.beta, layer.gamma, layer.phi))


def flow_forward(stack: FlowStack, f_tilde):
    """Push a GP value through the stack (layers applied in order)."""
    x = as_tensor(f_tilde)
    if stack.kind is FlowKind.LINEAR:
        return stack.alpha * x + stack.beta
    for layer in stack.layers:
        x = sal_forward(x, *_layer_tensors(layer))
    return x


def flow_inverse(stack: FlowStack, y):
    y = as_tensor(y)
    if stack.kind is FlowKind.LINEAR:
        if stack.alpha == 0:
            raise ZeroDivisionError("linear flow with alpha = 0 is not invertible")
        return (y - stack.beta) / stack.alpha
    for layer in reversed(stack.layers):
        y = sal_inverse(y, *_layer_tensors(layer))
    return y


def flow_logdet(stack: FlowStack, x):
    """Sum over layers of ``log |dG_j/du|`` evaluated along the composition."""
    x = as_tensor(x)
    if stack.kind is FlowKind.LINEAR:
        return torch.log(torch.abs(torch.as_tensor(stack.alpha, dtype=DTYPE))).expand(x.shape).clone()
    total = torch.zeros_like(x)
    for layer in stack.layers:
        p = _layer_tensors(layer)
        total = total + sal_logderiv(x, *p)
        x = sal_forward(x, *p)
    return total


def etgp_cross_cov(alpha_d, alpha_dp, k_val):
    """Covariance of two linear-flow outputs sharing one GP."""
    return alpha_d * alpha_dp * k_val


# ---------------------------------------------------------------------------
# batched, trainable bank of d_x flows
# ---------------------------------------------------------------------------


class FlowBank(nn.Module):
    """Trainable flows for all ``d_x`` dimensions, evaluated in one shot.

    SAL: ``log_alpha, beta, gamma, log_phi`` each of shape ``(d_x, J)``.
    Linear: ``alpha, beta`` each of shape ``(d_x,)``.
    """

    def __init__(self, d_x: int, kind="sal", n_layers: int = 2, init_noise: float = 0.01, generator=None):
        super().__init__()
        self.kind = FlowKind.parse(kind)
        self.d_x = d_x
        if self.kind is FlowKind.SAL:
            if n_layers < 1:
                raise ValueError("n_layers must be >= 1")
            self.n_layers = n_layers
            shape = (d_x, n_layers)
        else:
            self.n_layers = 1
            shape = (d_x,)

        def noise():
            return init_noise * torch.randn(shape, dtype=DTYPE, generator=generator)

        if self.kind is FlowKind.SAL:
            self.log_alpha = nn.Parameter(noise())
            self.beta = nn.Parameter(noise())
            self.gamma = nn.Parameter(noise())
            self.log_phi = nn.Parameter(noise())
        else:
            self.alpha = nn.Parameter(1.0 + noise())
            self.beta = nn.Parameter(noise())

    @property
    def params_per_dim(self) -> int:
        """``η``: trainable flow parameters per output dimension."""
        return 4 * self.n_layers if self.kind is FlowKind.SAL else 2

    def forward(self, f_tilde: torch.Tensor) -> torch.Tensor:
        """Map ``(...,)`` GP samples to ``(..., d_x)`` transition outputs."""
        u = f_tilde.unsqueeze(-1)
        if self.kind is FlowKind.LINEAR:
            return self.alpha * u + self.beta
        u = u.expand(*f_tilde.shape, self.d_x)
        alpha, phi = torch.exp(self.log_alpha), torch.exp(self.log_phi)
        for j in range(self.n_layers):
            u = sal_forward(u, alpha[:, j], self.beta[:, j], self.gamma[:, j], phi[:, j])
        return u

    def stack(self, d: int) -> FlowStack:
        """Detached per-dimension snapshot."""
        with torch.no_grad():
            if self.kind is FlowKind.LINEAR:
                return FlowStack.linear(float(self.alpha[d]), float(self.beta[d]), dim_index=d)
            layers = [
                SalLayerParams(
                    alpha=float(torch.exp(self.log_alpha[d, j])),
                    beta=float(self.beta[d, j]),
                    gamma=float(self.gamma[d, j]),
                    phi=float(torch.exp(self.log_phi[d, j])),
                )
                for j in range(self.n_layers)
            ]
        return FlowStack.sal(layers, dim_index=d)

    def stacks(self) -> list[FlowStack]:
        return [self.stack(d) for d in range(self.d_x)]
