"""Stationary ARD covariance functions for the transition GP(s).

Hyperparameters live in log space as ``torch.nn.Parameter`` so that the
optimiser can move them freely; the positive values are exposed through
properties.  A leading batch shape gives one kernel per independent GP.
"""
from __future__ import annotations

import math
from enum import Enum

import torch
from torch import nn

from .numerics import DTYPE, DimensionMismatch, as_tensor

SQRT5 = math.sqrt(5.0)


class KernelFamily(str, Enum):
    SQUARED_EXPONENTIAL = "se"
    MATERN52 = "matern52"

    @classmethod
    def parse(cls, name: "str | KernelFamily") -> "KernelFamily":
        if isinstance(name, KernelFamily):
            return name
        key = name.strip().lower().replace("-", "").replace("_", "")
        aliases = {
            "se": cls.SQUARED_EXPONENTIAL,
            "rbf": cls.SQUARED_EXPONENTIAL,
            "squaredexponential": cls.SQUARED_EXPONENTIAL,
            "matern52": cls.MATERN52,
            "matern": cls.MATERN52,
        }
        if key not in aliases:
            raise ValueError(f"unknown kernel family {name!r}")
        return aliases[key]


class KernelParams(nn.Module):
    """Variance and ARD lengthscales of one (or a batch of) stationary kernels.

    Parameters
    ----------
    family : KernelFamily or str
    variance : float or tensor of shape ``batch_shape``
    lengthscales : float, sequence or tensor broadcastable to ``batch_shape + (d_in,)``
    d_in : input dimension, needed when ``lengthscales`` is a scalar
    batch_shape : leading shape, e.g. ``(d_x,)`` for the independent-GP baseline
    """

    def __init__(self, family="matern52", variance=1.0, lengthscales=1.0, d_in=None, batch_shape=()):
        super().__init__()
        self.family = KernelFamily.parse(family)
        batch_shape = tuple(batch_shape)
        ls = as_tensor(lengthscales)
        if ls.ndim == 0:
            if d_in is None:
                raise ValueError("d_in is required when lengthscales is a scalar")
            ls = ls.expand(batch_shape + (d_in,))
        else:
            ls = ls.expand(batch_shape + (ls.shape[-1],))
        var = as_tensor(variance).expand(batch_shape)
        if bool((var <= 0).any()) or bool((ls <= 0).any()):
            raise ValueError("kernel variance and lengthscales must be positive")
        self.log_variance = nn.Parameter(torch.log(var).clone())
        self.log_lengthscales = nn.Parameter(torch.log(ls).clone())

    @property
    def variance(self) -> torch.Tensor:
        return torch.exp(self.log_variance)

    @property
    def lengthscales(self) -> torch.Tensor:
        return torch.exp(self.log_lengthscales)

    @property
    def d_in(self) -> int:
        return self.log_lengthscales.shape[-1]

    @property
    def batch_shape(self) -> tuple:
        return tuple(self.log_variance.shape)

    def num_hyperparameters(self) -> int:
        """Hyperparameter count of a single kernel (``|θ_gp|``)."""
        return 1 + self.d_in


def _check(params: KernelParams, X: torch.Tensor, name: str) -> None:
    if X.ndim < 1 or X.shape[-1] != params.d_in:
        raise DimensionMismatch(
            f"{name} has point dimension {X.shape[-1] if X.ndim else 0}, kernel expects {params.d_in}"
        )


def scaled_sqdist(params: KernelParams, X: torch.Tensor, X2: torch.Tensor) -> torch.Tensor:
    """Squared distance after dividing each coordinate by its lengthscale.

    ``X``: ``(..., n, d)``, ``X2``: ``(..., n2, d)``; batch dims broadcast
    against ``params.batch_shape``.
    """
    ls = params.lengthscales.unsqueeze(-2)
    A = X / ls
    B = X2 / ls
    # explicit differences keep the diagonal exactly zero and gradients finite
    diff = A.unsqueeze(-2) - B.unsqueeze(-3)
    return (diff * diff).sum(-1)


def kernel_from_sqdist(params: KernelParams, r2: torch.Tensor) -> torch.Tensor:
    var = params.variance[..., None, None]
    if params.family is KernelFamily.SQUARED_EXPONENTIAL:
        return var * torch.exp(-0.5 * r2)
    # sqrt has an infinite derivative at 0; the clamp keeps autograd finite
    # while the Matérn-5/2 value and first derivative at r=0 stay exact.
    r = torch.sqrt(torch.clamp(r2, min=1e-36))
    r = torch.where(r2 > 0, r, torch.zeros_like(r))
    return var * (1.0 + SQRT5 * r + (5.0 / 3.0) * r2) * torch.exp(-SQRT5 * r)


def kernel_matrix(params: KernelParams, X, X2=None) -> torch.Tensor:
    """Covariance matrix with entries ``k(X[i], X2[j])``."""
    X = as_tensor(X)
    X2 = X if X2 is None else as_tensor(X2)
    _check(params, X, "X")
    _check(params, X2, "X2")
    if X.ndim == 1:
        X = X.unsqueeze(0)
    if X2.ndim == 1:
        X2 = X2.unsqueeze(0)
    return kernel_from_sqdist(params, scaled_sqdist(params, X, X2))


def kernel_diag(params: KernelParams, X) -> torch.Tensor:
    """``k(X[i], X[i])``, which is the variance for every stationary family."""
    X = as_tensor(X)
    _check(params, X, "X")
    if X.ndim == 1:
        X = X.unsqueeze(0)
    var = params.variance
    target = torch.broadcast_shapes(var.shape + (1,), X.shape[:-1])
    return var.unsqueeze(-1).expand(target)


def default_params(d_in: int, family="matern52", batch_shape=()) -> KernelParams:
    return KernelParams(family=family, variance=1.0, lengthscales=1.0, d_in=d_in, batch_shape=batch_shape)


__all__ = [
    "KernelFamily",
    "KernelParams",
    "kernel_matrix",
    "kernel_diag",
    "scaled_sqdist",
    "kernel_from_sqdist",
    "default_params",
    "DTYPE",
]
