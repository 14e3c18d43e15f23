"""Sparse variational GP with ``q(u) = N(m, S)`` at trainable inducing inputs.

The predictive marginal at an input ``x`` after integrating out ``u`` is

    mu(x) = k_xz Kzz^-1 m
    s2(x) = k(x, x) - k_xz Kzz^-1 (Kzz - S) Kzz^-1 k_zx

and is evaluated with triangular solves against ``chol(Kzz)``.  With
``a = Lz^-1 k_zx`` the variance becomes ``k(x,x) - |a|^2 + |G^T a|^2`` where
``G = Lz^-1 L_S``, so the ``m x m`` pieces are formed once per objective
evaluation and every rollout step costs ``O(m^2)`` per input.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .kernels import KernelParams, kernel_diag, kernel_matrix
from .numerics import DTYPE, CholFactor, DimensionMismatch, as_tensor, cholesky_jitter, gaussian_kl

CLAMP_REPORT_TOL = 1e-10


class InducingState(nn.Module):
    """Inducing inputs ``Z`` and the variational parameters of ``q(u)``.

    ``S`` is stored through its lower Cholesky factor: the strictly lower
    entries as a flat vector and the diagonal in log space.  A leading batch
    shape gives one independent GP per batch entry.
    """

    def __init__(self, Z, m_vec=None, S_factor=None, init_scale: float = 0.1):
        super().__init__()
        Z = as_tensor(Z)
        if Z.ndim < 2:
            raise DimensionMismatch("Z must have shape (..., m, d_in)")
        batch, m = tuple(Z.shape[:-2]), Z.shape[-2]
        if m < 1:
            raise ValueError("need at least one inducing point")
        self.Z = nn.Parameter(Z.clone())
        m_vec = torch.zeros(batch + (m,), dtype=DTYPE) if m_vec is None else as_tensor(m_vec).expand(batch + (m,))
        self.m_vec = nn.Parameter(m_vec.clone())
        if S_factor is None:
            S_factor = math.sqrt(init_scale) * torch.eye(m, dtype=DTYPE).expand(batch + (m, m))
        S_factor = as_tensor(S_factor).expand(batch + (m, m))
        diag = torch.diagonal(S_factor, dim1=-2, dim2=-1)
        if bool((diag < 0).any()):
            raise ValueError("S_factor needs a non-negative diagonal")
        rows, cols = torch.tril_indices(m, m, offset=-1)
        self.register_buffer("_rows", rows, persistent=False)
        self.register_buffer("_cols", cols, persistent=False)
        self.S_offdiag = nn.Parameter(S_factor[..., rows, cols].clone())
        self.S_log_diag = nn.Parameter(torch.log(diag).clone())

    @property
    def num_inducing(self) -> int:
        return self.Z.shape[-2]

    @property
    def d_in(self) -> int:
        return self.Z.shape[-1]

    @property
    def batch_shape(self) -> tuple:
        return tuple(self.Z.shape[:-2])

    @property
    def S_factor(self) -> torch.Tensor:
        m = self.num_inducing
        L = torch.diag_embed(torch.exp(self.S_log_diag))
        if m > 1:
            off = torch.zeros(self.batch_shape + (m, m), dtype=DTYPE)
            off = _scatter_lower(off, self._rows, self._cols, self.S_offdiag)
            L = L + off
        return L

    @property
    def S(self) -> torch.Tensor:
        L = self.S_factor
        return L @ L.transpose(-1, -2)

    def set_variational(self, m_vec=None, S_factor=None) -> None:
        """Overwrite ``m`` and/or the Cholesky factor of ``S`` in place."""
        with torch.no_grad():
            if m_vec is not None:
                self.m_vec.copy_(as_tensor(m_vec).expand_as(self.m_vec))
            if S_factor is not None:
                S_factor = as_tensor(S_factor).expand(self.batch_shape + (self.num_inducing,) * 2)
                diag = torch.diagonal(S_factor, dim1=-2, dim2=-1)
                if bool((diag < 0).any()):
                    raise ValueError("S_factor needs a non-negative diagonal")
                self.S_offdiag.copy_(S_factor[..., self._rows, self._cols])
                self.S_log_diag.copy_(torch.log(diag))


def _scatter_lower(out: torch.Tensor, rows, cols, values) -> torch.Tensor:
    flat_idx = rows * out.shape[-1] + cols
    flat = out.reshape(out.shape[:-2] + (-1,))
    flat = flat.index_copy(-1, flat_idx, values)
    return flat.reshape(out.shape)


def kzz_factor(gp: InducingState, kp: KernelParams, jitter: float = 0.0) -> CholFactor:
    """Cholesky of ``Kzz + jitter * I`` with escalation on failure."""
    Kzz = kernel_matrix(kp, gp.Z, gp.Z)
    if jitter > 0:
        Kzz = Kzz + jitter * torch.eye(gp.num_inducing, dtype=DTYPE)
    base = 1e-6 * float(torch.diagonal(Kzz, dim1=-2, dim2=-1).detach().mean())
    return cholesky_jitter(Kzz, base_jitter=max(base, 1e-300))


@dataclass
class Predictor:
    """Per-evaluation cache of the ``m x m`` quantities of a sparse GP."""

    kernel: KernelParams
    Z: torch.Tensor
    Lz: torch.Tensor
    c: torch.Tensor  # Lz^-1 m, shape batch + (m, 1)
    G: torch.Tensor  # Lz^-1 L_S

    def moments(self, x: torch.Tensor, clamp: bool = True):
        """Marginal mean and variance at inputs ``x`` of shape ``(..., d_in)``.

        Unbatched GP: returns ``(...)`` tensors.  Batched GP with batch shape
        ``(b,)``: returns ``(..., b)`` tensors.
        """
        lead = x.shape[:-1]
        X = x.reshape(-1, x.shape[-1])
        Kzx = kernel_matrix(self.kernel, self.Z, X)  # batch + (m, N)
        a = torch.linalg.solve_triangular(self.Lz, Kzx, upper=False)
        mu = (self.c * a).sum(-2)
        b = self.G.transpose(-1, -2) @ a
        kxx = self.kernel.variance.unsqueeze(-1)
        s2 = kxx - (a * a).sum(-2) + (b * b).sum(-2)
        if mu.ndim > 1:
            mu, s2 = mu.transpose(-1, -2), s2.transpose(-1, -2)
            out_shape = lead + mu.shape[-1:]
        else:
            out_shape = lead
        mu, s2 = mu.reshape(out_shape), s2.reshape(out_shape)
        if clamp:
            s2 = torch.clamp(s2, min=0.0)
        return mu, s2


def make_predictor(gp: InducingState, kp: KernelParams, jitter: float = 0.0) -> Predictor:
    if gp.d_in != kp.d_in:
        raise DimensionMismatch(f"inducing inputs have dimension {gp.d_in}, kernel expects {kp.d_in}")
    Lz = kzz_factor(gp, kp, jitter).L
    c = torch.linalg.solve_triangular(Lz, gp.m_vec.unsqueeze(-1), upper=False)
    G = torch.linalg.solve_triangular(Lz, gp.S_factor, upper=False)
    return Predictor(kernel=kp, Z=gp.Z, Lz=Lz, c=c, G=G)


def conditional_moments(gp: InducingState, kp: KernelParams, x, jitter: float = 0.0, return_clamp: bool = False):
    """``q(f~ | x) = N(mu, s2)`` for a single input point or a batch of points.

    Negative variances produced by round-off are clamped to zero; the largest
    clamped magnitude is returned as a third value when ``return_clamp`` is set.
    """
    x = as_tensor(x)
    if x.shape[-1] != kp.d_in:
        raise DimensionMismatch(f"input has dimension {x.shape[-1]}, kernel expects {kp.d_in}")
    pred = make_predictor(gp, kp, jitter)
    mu, s2_raw = pred.moments(x, clamp=False)
    clamped = float(torch.clamp(-s2_raw.detach(), min=0.0).max()) if s2_raw.numel() else 0.0
    s2 = torch.clamp(s2_raw, min=0.0)
    if return_clamp:
        return mu, s2, clamped
    return mu, s2


def kl_inducing(gp: InducingState, kp: KernelParams, jitter: float = 0.0) -> torch.Tensor:
    """KL(q(u) || N(0, Kzz)); summed over the batch of independent GPs."""
    Lz = kzz_factor(gp, kp, jitter)
    Lq = CholFactor(L=gp.S_factor, jitter_used=0.0)
    kl = gaussian_kl(gp.m_vec, Lq, torch.zeros_like(gp.m_vec), Lz)
    return kl.sum()


def exact_gp_posterior(kp: KernelParams, X_train, f_train, x_star):
    """Noise-free GP regression: posterior mean and variance at ``x_star``."""
    X = as_tensor(X_train)
    f = as_tensor(f_train)
    xs = as_tensor(x_star)
    if X.ndim == 1:
        X = X.unsqueeze(-1) if kp.d_in == 1 else X.unsqueeze(0)
    single = xs.ndim == 1
    if single:
        xs = xs.unsqueeze(0)
    if X.shape[0] != f.shape[0]:
        raise DimensionMismatch(f"{X.shape[0]} training inputs but {f.shape[0]} targets")
    Kxx = kernel_matrix(kp, X, X)
    fac = cholesky_jitter(Kxx, base_jitter=1e-12 * float(torch.diagonal(Kxx).detach().mean()))
    Ksx = kernel_matrix(kp, xs, X)
    alpha = fac.solve(f.unsqueeze(-1)).squeeze(-1)
    xi = Ksx @ alpha
    v = torch.linalg.solve_triangular(fac.L, Ksx.T, upper=False)
    Xi = torch.clamp(kernel_diag(kp, xs) - (v * v).sum(0), min=0.0)
    if single:
        return xi[0], Xi[0]
    return xi, Xi
