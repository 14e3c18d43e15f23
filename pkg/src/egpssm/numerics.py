"""Dense linear algebra and Gaussian helpers shared by the whole package.

Everything here operates on float64 ``torch`` tensors so that results stay
differentiable with autograd.  Plain Python / numpy inputs are accepted and
converted on the way in.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

DTYPE = torch.float64
LOG_2PI = math.log(2.0 * math.pi)

# variances in [-NEG_VAR_TOL, 0) are treated as round-off and clamped
NEG_VAR_TOL = 1e-12


class NotPositiveDefinite(ValueError):
    """Raised when a matrix cannot be Cholesky-factorised even with jitter."""


class DimensionMismatch(ValueError):
    """Raised when operand shapes are incompatible."""


class NegativeVariance(ValueError):
    """Raised when a variance is negative beyond round-off tolerance."""


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(x, dtype=DTYPE)


@dataclass(frozen=True)
class CholFactor:
    """Lower Cholesky factor ``L`` of ``A + jitter_used * I``."""

    L: torch.Tensor
    jitter_used: float

    @property
    def n(self) -> int:
        return self.L.shape[-1]

    def logdet(self) -> torch.Tensor:
        """Log-determinant of the factorised matrix."""
        return 2.0 * torch.log(torch.diagonal(self.L, dim1=-2, dim2=-1)).sum(-1)

    def solve(self, B: torch.Tensor) -> torch.Tensor:
        """Apply the inverse of the factorised matrix via two triangular solves."""
        tmp = torch.linalg.solve_triangular(self.L, B, upper=False)
        return torch.linalg.solve_triangular(self.L.transpose(-1, -2), tmp, upper=True)


@dataclass(frozen=True)
class DiagGaussian:
    mean: torch.Tensor
    var: torch.Tensor

    def __post_init__(self):
        mean, var = as_tensor(self.mean), as_tensor(self.var)
        if mean.shape != var.shape:
            raise DimensionMismatch(f"mean shape {tuple(mean.shape)} != var shape {tuple(var.shape)}")
        if bool((var <= 0).any()):
            raise ValueError("DiagGaussian variances must be strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]


def cholesky_jitter(A, base_jitter: float = 1e-6, max_tries: int = 6) -> CholFactor:
    """Cholesky factorisation with an escalating diagonal jitter.

    Tries ``A`` itself first, then ``A + base_jitter * 10**k * I`` for
    ``k = 0 .. max_tries - 1``.  Works on batched ``(..., n, n)`` input, in
    which case one common jitter is used for the whole batch.

    Raises
    ------
    NotPositiveDefinite
        If every attempt fails.
    """
    A = as_tensor(A)
    if A.ndim < 2 or A.shape[-1] != A.shape[-2]:
        raise DimensionMismatch(f"expected a square matrix, got shape {tuple(A.shape)}")
    if base_jitter <= 0:
        raise ValueError("base_jitter must be positive")
    eye = torch.eye(A.shape[-1], dtype=A.dtype)
    schedule = [0.0] + [base_jitter * 10.0**k for k in range(max_tries)]
    for eps in schedule:
        L, info = torch.linalg.cholesky_ex(A + eps * eye if eps else A)
        if not bool((info != 0).any()) and bool(torch.isfinite(L).all()):
            return CholFactor(L=L, jitter_used=eps)
    raise NotPositiveDefinite(
        f"matrix of size {A.shape[-1]} not positive definite with jitter up to {schedule[-1]:.3g}"
    )


def gaussian_kl(q_mean, q_cov_factor: CholFactor, p_mean, p_cov_factor: CholFactor) -> torch.Tensor:
    """KL(N(q_mean, Lq Lq^T) || N(p_mean, Lp Lp^T)), batched over leading dims."""
    q_mean, p_mean = as_tensor(q_mean), as_tensor(p_mean)
    Lq, Lp = q_cov_factor.L, p_cov_factor.L
    n = q_mean.shape[-1]
    if p_mean.shape[-1] != n or Lq.shape[-1] != n or Lp.shape[-1] != n:
        raise DimensionMismatch(
            f"KL operands disagree: q_mean {n}, p_mean {p_mean.shape[-1]}, "
            f"Lq {Lq.shape[-1]}, Lp {Lp.shape[-1]}"
        )
    # tr(Σp⁻¹Σq) = ||Lp⁻¹ Lq||_F²
    M = torch.linalg.solve_triangular(Lp, Lq, upper=False)
    trace = (M * M).sum((-2, -1))
    diff = (p_mean - q_mean).unsqueeze(-1)
    alpha = torch.linalg.solve_triangular(Lp, diff, upper=False)
    maha = (alpha * alpha).sum((-2, -1))
    return 0.5 * (trace + maha - n + p_cov_factor.logdet() - q_cov_factor.logdet())


def diag_gaussian_kl(q_mean, q_var, p_mean, p_var) -> torch.Tensor:
    """KL between diagonal Gaussians, summed over the last axis."""
    q_mean, q_var, p_mean, p_var = map(as_tensor, (q_mean, q_var, p_mean, p_var))
    if not (q_mean.shape[-1] == q_var.shape[-1] == p_mean.shape[-1] == p_var.shape[-1]):
        raise DimensionMismatch("diagonal KL operands disagree in dimension")
    return 0.5 * (q_var / p_var + (q_mean - p_mean) ** 2 / p_var - 1.0 + torch.log(p_var) - torch.log(q_var)).sum(-1)


def gaussian_logpdf(x, dist: DiagGaussian) -> torch.Tensor:
    """Log density of ``x`` under a diagonal Gaussian, summed over the last axis."""
    x = as_tensor(x)
    if x.shape[-1] != dist.dim:
        raise DimensionMismatch(f"point has dimension {x.shape[-1]}, distribution {dist.dim}")
    return diag_logpdf(x, dist.mean, dist.var)


def diag_logpdf(x: torch.Tensor, mean: torch.Tensor, var: torch.Tensor) -> torch.Tensor:
    # unchecked fast path used inside rollouts
    return -0.5 * (LOG_2PI + torch.log(var) + (x - mean) ** 2 / var).sum(-1)


def reparam_sample(mean, var, eps):
    """Return ``mean + sqrt(var) * eps``.

    Tiny negative variances (round-off, down to ``-1e-12``) are clamped to zero;
    anything more negative raises :class:`NegativeVariance`.
    """
    if isinstance(var, torch.Tensor):
        if bool((var < -NEG_VAR_TOL).any()):
            raise NegativeVariance(f"variance {float(var.detach().min()):.3e} is negative")
        return mean + torch.sqrt(torch.clamp(var, min=0.0)) * eps
    if var < -NEG_VAR_TOL:
        raise NegativeVariance(f"variance {var:.3e} is negative")
    return mean + math.sqrt(max(var, 0.0)) * eps
