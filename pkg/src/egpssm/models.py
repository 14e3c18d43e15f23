"""GP state-space models, their ELBOs and multi-step forecasts.

Two transition models share the same state-space scaffolding:

``EgpssmModel``
    one sparse GP ``f~(x)`` whose scalar output is pushed through ``d_x``
    element-wise flows, ``f_d = G_d(f~)``.
``BaselineModel``
    ``d_x`` mutually independent sparse GPs, one per latent dimension.

Both use ``x_t = f_t + v_t`` with diagonal ``Q``, a fixed linear emission
``y_t = C x_t + e_t`` with diagonal ``R``, free Gaussian ``q(x0)`` per
training sequence, and the Monte-Carlo ELBO

    sum_t E_q(x_t)[log p(y_t | x_t)] - KL(q(u) || p(u)) - KL(q(x0) || p(x0))

where ``q(x_t)`` samples come from reparameterised rollouts.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .data import EmptySequence, Sequence
from .flows import FlowBank, FlowKind
from .kernels import KernelFamily, KernelParams
from .numerics import DTYPE, DiagGaussian, DimensionMismatch, as_tensor, diag_gaussian_kl, diag_logpdf
from .sparse_gp import InducingState, Predictor, kl_inducing, make_predictor

CHECKPOINT_VERSION = 1

# floor on the sampled GP variance so that sqrt stays differentiable
VAR_FLOOR = 1e-12


class ModelKind(str, Enum):
    EGPSSM = "egpssm"
    BASELINE = "baseline"

    @classmethod
    def parse(cls, name) -> "ModelKind":
        if isinstance(name, ModelKind):
            return name
        key = str(name).strip().lower()
        if key in ("egpssm", "etgp", "shared"):
            return cls.EGPSSM
        if key in ("baseline", "prssm", "independent"):
            return cls.BASELINE
        raise ValueError(f"unknown model kind {name!r}")


@dataclass
class ModelSpec:
    """Structural settings; everything needed to rebuild a model skeleton."""

    kind: str = "egpssm"
    d_x: int = 2
    d_y: int = 2
    d_c: int = 0
    m: int = 50
    kernel: str = "matern52"
    flow: str = "linear"
    n_layers: int = 2
    jitter: float = 1e-6
    n_sequences: int = 1
    process_noise_sd: float = 0.05
    emission_noise_sd: float = 0.1

    def __post_init__(self):
        self.kind = ModelKind.parse(self.kind).value
        self.kernel = KernelFamily.parse(self.kernel).value
        self.flow = FlowKind.parse(self.flow).value
        if min(self.d_x, self.d_y, self.m, self.n_sequences) < 1 or self.d_c < 0:
            raise ValueError(f"invalid model dimensions: {self}")
        if self.d_y > self.d_x:
            raise ValueError("d_y must not exceed d_x (C must have full row rank)")


# ---------------------------------------------------------------------------
# state-space scaffolding
# ---------------------------------------------------------------------------


def default_emission(d_y: int, d_x: int) -> torch.Tensor:
    """``C = [I 0]``: observe the first ``d_y`` latent dimensions."""
    return torch.eye(d_x, dtype=DTYPE)[:d_y]


class SsmParams(nn.Module):
    def __init__(self, d_x, d_y, d_c=0, C=None, q_var=0.05**2, r_var=0.1**2, x0_prior: DiagGaussian | None = None):
        super().__init__()
        self.d_x, self.d_y, self.d_c = d_x, d_y, d_c
        C = default_emission(d_y, d_x) if C is None else as_tensor(C)
        if C.shape != (d_y, d_x):
            raise DimensionMismatch(f"C has shape {tuple(C.shape)}, expected {(d_y, d_x)}")
        if int(torch.linalg.matrix_rank(C)) != d_y:
            raise ValueError("emission matrix C must have full row rank")
        self.register_buffer("C", C.clone())
        self.Q_logvar = nn.Parameter(torch.log(as_tensor(q_var)).expand(d_x).clone())
        self.R_logvar = nn.Parameter(torch.log(as_tensor(r_var)).expand(d_y).clone())
        if x0_prior is None:
            x0_prior = DiagGaussian(torch.zeros(d_x, dtype=DTYPE), torch.ones(d_x, dtype=DTYPE))
        if x0_prior.dim != d_x:
            raise DimensionMismatch("x0 prior dimension differs from d_x")
        self.register_buffer("x0_prior_mean", x0_prior.mean.clone())
        self.register_buffer("x0_prior_var", x0_prior.var.clone())

    @property
    def Q(self) -> torch.Tensor:
        return torch.exp(self.Q_logvar)

    @property
    def R(self) -> torch.Tensor:
        return torch.exp(self.R_logvar)

    @property
    def x0_prior(self) -> DiagGaussian:
        return DiagGaussian(self.x0_prior_mean, self.x0_prior_var)

    def emission_mean(self, x: torch.Tensor) -> torch.Tensor:
        return x @ self.C.T


def emission_loglik(ssm: SsmParams, x, y) -> torch.Tensor:
    """``log N(y | C x, R)`` summed over observation dimensions."""
    x, y = as_tensor(x), as_tensor(y)
    if x.shape[-1] != ssm.d_x or y.shape[-1] != ssm.d_y:
        raise DimensionMismatch(f"got x dim {x.shape[-1]} / y dim {y.shape[-1]}, expected {ssm.d_x} / {ssm.d_y}")
    return diag_logpdf(y, ssm.emission_mean(x), ssm.R)


class InitialStates(nn.Module):
    """Free variational ``q(x0) = N(mean, diag(exp(logvar)))``, one row per sequence."""

    def __init__(self, n_seq: int, d_x: int, mean=None, var: float = 1.0):
        super().__init__()
        mean = torch.zeros(n_seq, d_x, dtype=DTYPE) if mean is None else as_tensor(mean).reshape(n_seq, d_x)
        self.mean = nn.Parameter(mean.clone())
        self.logvar = nn.Parameter(torch.full((n_seq, d_x), math.log(var), dtype=DTYPE))

    @property
    def n_seq(self) -> int:
        return self.mean.shape[0]

    @property
    def var(self) -> torch.Tensor:
        return torch.exp(self.logvar)

    def distribution(self, i: int) -> DiagGaussian:
        return DiagGaussian(self.mean[i].detach(), self.var[i].detach())


class X0View:
    """Read-only ``q(x0)`` built from existing tensors (e.g. rows of a larger table)."""

    def __init__(self, mean: torch.Tensor, logvar: torch.Tensor):
        self.mean, self.logvar = mean, logvar

    @property
    def n_seq(self) -> int:
        return self.mean.shape[0]

    @property
    def var(self) -> torch.Tensor:
        return torch.exp(self.logvar)


@dataclass
class ElboEstimate:
    total: float
    exp_loglik: float
    kl_u: float
    kl_x0: float


@dataclass
class Batch:
    """Sequences padded to a common length with a validity mask."""

    y: torch.Tensor  # (B, T, d_y)
    c: torch.Tensor  # (B, T, d_c)
    mask: torch.Tensor  # (B, T)

    @property
    def size(self) -> int:
        return self.y.shape[0]

    @property
    def T(self) -> int:
        return self.y.shape[1]

    @classmethod
    def from_sequences(cls, seqs: list[Sequence], d_y: int, d_c: int) -> "Batch":
        if not seqs:
            raise EmptySequence("no sequences given")
        for s in seqs:
            if s.T < 1:
                raise EmptySequence(f"sequence {s.name!r} is empty")
            if s.d_y != d_y or s.d_c != d_c:
                raise DimensionMismatch(
                    f"sequence {s.name!r} has d_y={s.d_y}, d_c={s.d_c}; model expects d_y={d_y}, d_c={d_c}"
                )
        T = max(s.T for s in seqs)
        B = len(seqs)
        y = torch.zeros(B, T, d_y, dtype=DTYPE)
        c = torch.zeros(B, T, d_c, dtype=DTYPE)
        mask = torch.zeros(B, T, dtype=DTYPE)
        for i, s in enumerate(seqs):
            y[i, : s.T] = torch.from_numpy(s.y)
            c[i, : s.T] = torch.from_numpy(s.c)
            mask[i, : s.T] = 1.0
        return cls(y, c, mask)


class GPSSM(nn.Module):
    """Shared machinery of both transition models."""

    kind: ModelKind

    def __init__(self, spec: ModelSpec, ssm: SsmParams):
        super().__init__()
        self.spec = spec
        self.ssm = ssm
        self.x0 = InitialStates(spec.n_sequences, spec.d_x)

    @property
    def d_x(self) -> int:
        return self.ssm.d_x

    @property
    def d_in(self) -> int:
        return self.ssm.d_x + self.ssm.d_c

    # subclasses ------------------------------------------------------------
    def predictor(self) -> Predictor:
        raise NotImplementedError

    def kl_u(self) -> torch.Tensor:
        raise NotImplementedError

    def noise_shape_f(self) -> tuple:
        """Trailing shape of the GP noise drawn per step and particle."""
        raise NotImplementedError

    def transition_mean_var(self, pred: Predictor, gp_in: torch.Tensor):
        return pred.moments(gp_in)

    def push(self, f_tilde: torch.Tensor) -> torch.Tensor:
        """Map GP samples to the ``d_x`` transition outputs."""
        raise NotImplementedError

    # ------------------------------------------------------------------------
    def step(self, pred: Predictor, x_prev, c_prev, eps_f, eps_x):
        """One reparameterised transition; returns ``(f_tilde, f, x_next)``."""
        gp_in = torch.cat([x_prev, c_prev], dim=-1) if c_prev.shape[-1] else x_prev
        mu, s2 = self.transition_mean_var(pred, gp_in)
        f_tilde = mu + torch.sqrt(torch.clamp(s2, min=VAR_FLOOR)) * eps_f
        f = self.push(f_tilde)
        x_next = f + torch.sqrt(self.ssm.Q) * eps_x
        return f_tilde, f, x_next

    def draw_noise(self, n_mc: int, B: int, T: int, seed: int):
        gen = torch.Generator().manual_seed(int(seed))
        d = self.d_x
        eps0 = torch.randn(n_mc, B, d, generator=gen, dtype=DTYPE)
        eps_f = torch.randn((T, n_mc, B) + self.noise_shape_f(), generator=gen, dtype=DTYPE)
        eps_x = torch.randn(T, n_mc, B, d, generator=gen, dtype=DTYPE)
        return eps0, eps_f, eps_x

    def rollout(self, pred: Predictor, x0: torch.Tensor, controls: torch.Tensor, eps_f, eps_x):
        """Propagate ``(n_mc, B, d_x)`` particles through ``T`` controlled steps.

        ``controls`` has shape ``(B, T, d_c)``; returns states ``(T, n_mc, B, d_x)``.
        """
        T = controls.shape[1]
        x = x0
        states = []
        for t in range(T):
            c_t = controls[:, t].expand(x.shape[0], -1, -1)
            _, _, x = self.step(pred, x, c_t, eps_f[t], eps_x[t])
            states.append(x)
        return torch.stack(states)

    def _per_sequence(self, seqs, n_mc, seed, x0):
        if n_mc < 1:
            raise ValueError("n_mc must be >= 1")
        x0 = self.x0 if x0 is None else x0
        batch = Batch.from_sequences(seqs, self.ssm.d_y, self.ssm.d_c)
        if x0.n_seq != batch.size:
            raise DimensionMismatch(f"model holds q(x0) for {x0.n_seq} sequences, got {batch.size}")
        pred = self.predictor()
        eps0, eps_f, eps_x = self.draw_noise(n_mc, batch.size, batch.T, seed)
        x_init = x0.mean + torch.sqrt(x0.var) * eps0
        states = self.rollout(pred, x_init, batch.c, eps_f, eps_x)
        y = batch.y.transpose(0, 1).unsqueeze(1)  # (T, 1, B, d_y)
        ll = diag_logpdf(y, self.ssm.emission_mean(states), self.ssm.R)  # (T, n_mc, B)
        ll_seq = (ll.mean(1) * batch.mask.T).sum(0)
        kl_x0 = diag_gaussian_kl(x0.mean, x0.var, self.ssm.x0_prior_mean, self.ssm.x0_prior_var)
        return ll_seq, kl_x0

    def elbo_terms(self, seqs: list[Sequence], n_mc: int, seed: int, x0: InitialStates | None = None):
        """ELBO pieces as tensors: ``(total, exp_loglik, kl_u, kl_x0)``."""
        ll_seq, kl_x0 = self._per_sequence(seqs, n_mc, seed, x0)
        exp_ll = ll_seq.sum()
        kl_u = self.kl_u()
        kl_x0 = kl_x0.sum()
        total = exp_ll - kl_u - kl_x0
        return total, exp_ll, kl_u, kl_x0

    def sequence_scores(self, seqs: list[Sequence], n_mc: int, seed: int, x0=None) -> torch.Tensor:
        """Per-sequence share of the ELBO, ``E[log p(y | x)] - KL(q(x0) || p(x0))``."""
        ll_seq, kl_x0 = self._per_sequence(seqs, n_mc, seed, x0)
        return ll_seq - kl_x0

    def count_trainable(self) -> int:
        return sum(p.numel() for p in self.parameters() if p.requires_grad)


class EgpssmModel(GPSSM):
    """One shared sparse GP transformed by ``d_x`` marginal flows."""

    kind = ModelKind.EGPSSM

    def __init__(self, spec: ModelSpec, Z, ssm: SsmParams | None = None, flow_seed: int = 0):
        ssm = ssm or SsmParams(spec.d_x, spec.d_y, spec.d_c, q_var=spec.process_noise_sd**2, r_var=spec.emission_noise_sd**2)
        super().__init__(spec, ssm)
        d_in = spec.d_x + spec.d_c
        Z = as_tensor(Z)
        if Z.shape != (spec.m, d_in):
            raise DimensionMismatch(f"Z has shape {tuple(Z.shape)}, expected {(spec.m, d_in)}")
        self.kernel = KernelParams(spec.kernel, variance=1.0, lengthscales=1.0, d_in=d_in)
        self.gp = InducingState(Z)
        gen = torch.Generator().manual_seed(flow_seed)
        self.flows = FlowBank(spec.d_x, spec.flow, spec.n_layers, generator=gen)

    def predictor(self) -> Predictor:
        return make_predictor(self.gp, self.kernel, self.spec.jitter)

    def kl_u(self) -> torch.Tensor:
        return kl_inducing(self.gp, self.kernel, self.spec.jitter)

    def noise_shape_f(self) -> tuple:
        return ()

    def push(self, f_tilde):
        return self.flows(f_tilde)


class BaselineModel(GPSSM):
    """``d_x`` independent sparse GPs, each with its own kernel and ``q(u)``."""

    kind = ModelKind.BASELINE

    def __init__(self, spec: ModelSpec, Z, ssm: SsmParams | None = None):
        ssm = ssm or SsmParams(spec.d_x, spec.d_y, spec.d_c, q_var=spec.process_noise_sd**2, r_var=spec.emission_noise_sd**2)
        super().__init__(spec, ssm)
        d_in = spec.d_x + spec.d_c
        Z = as_tensor(Z)
        if Z.ndim == 2:
            Z = Z.expand(spec.d_x, -1, -1)
        if Z.shape != (spec.d_x, spec.m, d_in):
            raise DimensionMismatch(f"Z has shape {tuple(Z.shape)}, expected {(spec.d_x, spec.m, d_in)}")
        self.kernel = KernelParams(spec.kernel, variance=1.0, lengthscales=1.0, d_in=d_in, batch_shape=(spec.d_x,))
        self.gp = InducingState(Z)

    def predictor(self) -> Predictor:
        return make_predictor(self.gp, self.kernel, self.spec.jitter)

    def kl_u(self) -> torch.Tensor:
        return kl_inducing(self.gp, self.kernel, self.spec.jitter)

    def noise_shape_f(self) -> tuple:
        return (self.d_x,)

    def push(self, f_tilde):
        return f_tilde


# ---------------------------------------------------------------------------
# construction helpers
# ---------------------------------------------------------------------------


def init_inducing(seqs: list[Sequence], m: int, d_x: int, method: str = "uniform", seed: int = 0) -> np.ndarray:
    """Initial inducing inputs ``(m, d_x + d_c)``.

    Observed latent dimensions (the first ``d_y``) and control dimensions are
    placed uniformly over the data range (``uniform``) or at randomly
    subsampled time steps (``subsample``); unobserved latent dimensions are
    drawn from ``N(0, 1)``.
    """
    rng = np.random.default_rng(seed)
    Y = np.concatenate([s.y for s in seqs])
    Cc = np.concatenate([s.c for s in seqs])
    d_y, d_c = Y.shape[1], Cc.shape[1]
    if method == "uniform":
        lo, hi = np.concatenate([Y, Cc], 1).min(0), np.concatenate([Y, Cc], 1).max(0)
        obs = rng.uniform(lo, hi, size=(m, d_y + d_c))
    elif method == "subsample":
        rows = rng.choice(Y.shape[0], size=m, replace=Y.shape[0] < m)
        obs = np.concatenate([Y, Cc], 1)[rows] + 1e-3 * rng.standard_normal((m, d_y + d_c))
    else:
        raise ValueError(f"unknown inducing initialisation {method!r}")
    hidden = rng.standard_normal((m, d_x - d_y))
    return np.concatenate([obs[:, :d_y], hidden, obs[:, d_y:]], axis=1)


def build_model(spec: ModelSpec, seqs: list[Sequence] | None = None, seed: int = 0, init: str = "uniform") -> GPSSM:
    """Create a model with data-informed inducing inputs and ``q(x0)``."""
    d_in = spec.d_x + spec.d_c
    if seqs:
        Z = init_inducing(seqs, spec.m, spec.d_x, init, seed)
    else:
        Z = np.random.default_rng(seed).uniform(-2.0, 2.0, size=(spec.m, d_in))
    if ModelKind.parse(spec.kind) is ModelKind.EGPSSM:
        model: GPSSM = EgpssmModel(spec, Z, flow_seed=seed)
    else:
        model = BaselineModel(spec, Z)
    if seqs:
        init_initial_states(model.x0, model.ssm, seqs)
    return model


def init_initial_states(x0: InitialStates, ssm: SsmParams, seqs: list[Sequence], var: float = 0.1) -> None:
    """Centre each ``q(x0)`` at the least-squares state of the first observation."""
    C = ssm.C
    pinv = torch.linalg.pinv(C)
    with torch.no_grad():
        for i, s in enumerate(seqs[: x0.n_seq]):
            x0.mean[i] = pinv @ torch.from_numpy(s.y[0])
        x0.logvar.fill_(math.log(var))


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------


def sample_transition(model: GPSSM, x_prev, c_prev, eps_f, eps_x):
    """Single reparameterised transition ``x_{t-1} -> (f~, f, x_t)``."""
    x_prev = as_tensor(x_prev)
    c_prev = as_tensor(c_prev) if c_prev is not None else torch.zeros(x_prev.shape[:-1] + (0,), dtype=DTYPE)
    if x_prev.shape[-1] != model.d_x or c_prev.shape[-1] != model.ssm.d_c:
        raise DimensionMismatch("state / control dimension does not match the model")
    return model.step(model.predictor(), x_prev, c_prev, as_tensor(eps_f), as_tensor(eps_x))


def elbo(model: GPSSM, sequences: list[Sequence], n_mc: int = 8, rng_seed: int = 0) -> ElboEstimate:
    with torch.no_grad():
        _, ll, klu, klx = model.elbo_terms(sequences, n_mc, rng_seed)
    ll, klu, klx = float(ll), float(klu), float(klx)
    return ElboEstimate(total=ll - klu - klx, exp_loglik=ll, kl_u=klu, kl_x0=klx)


def fit_initial_states(
    model: GPSSM,
    seqs: list[Sequence],
    n_mc: int = 16,
    seed: int = 0,
    iters: int = 200,
    lr: float = 0.05,
    n_starts: int = 1,
) -> InitialStates:
    """Optimise fresh ``q(x0)`` for ``seqs`` with every model parameter frozen.

    With ``n_starts > 1`` every sequence gets extra random initial means
    (spread by the scale of the observations); the start with the best final
    per-sequence ELBO share is kept.  The transition map need not be
    invertible, so a single start at the first observation can end in a poor
    local optimum.
    """
    B, K = len(seqs), max(1, int(n_starts))
    rep = [s for _ in range(K) for s in seqs]
    x0 = InitialStates(B * K, model.d_x)
    init_initial_states(x0, model.ssm, rep)
    if K > 1:
        Y = np.concatenate([s.y for s in seqs])
        pinv = torch.linalg.pinv(model.ssm.C)
        scale = (pinv.abs() @ torch.from_numpy(Y.std(0) if len(Y) > 1 else np.ones(Y.shape[1]))).clamp(min=1e-3)
        scale = torch.where(scale > 1e-3, scale, torch.ones_like(scale))
        gen = torch.Generator().manual_seed(int(seed) + 7919)
        noise = torch.randn(K - 1, B, model.d_x, generator=gen, dtype=DTYPE) * scale
        with torch.no_grad():
            x0.mean[B:] += noise.reshape(-1, model.d_x)
    if iters > 0:
        opt = torch.optim.Adam(x0.parameters(), lr=lr)
        params = list(model.parameters())
        flags = [p.requires_grad for p in params]
        for p in params:
            p.requires_grad_(False)
        try:
            for _ in range(iters):
                opt.zero_grad()
                total = model.sequence_scores(rep, n_mc, seed, x0=x0).sum()
                (-total).backward()
                opt.step()
        finally:
            for p, f in zip(params, flags):
                p.requires_grad_(f)
    if K == 1:
        return x0
    with torch.no_grad():
        score = model.sequence_scores(rep, n_mc, seed, x0=x0).reshape(K, B)
        best = score.argmax(0)
        rows = best * B + torch.arange(B)
        out = InitialStates(B, model.d_x)
        out.mean.copy_(x0.mean[rows])
        out.logvar.copy_(x0.logvar[rows])
    return out


def forecast_many(
    model: GPSSM,
    warmups: list[Sequence],
    horizon: int,
    n_mc: int = 64,
    rng_seed: int = 0,
    future_controls: list | None = None,
    fit_iters: int = 200,
    n_starts: int = 1,
):
    """Forecast ``horizon`` steps after each warm-up prefix.

    ``q(x0)`` of every warm-up is fitted with the model frozen (optionally from
    ``n_starts`` initialisations, see :func:`fit_initial_states`), particles are
    propagated through the warm-up (using its controls) and then ``horizon``
    further steps.  Returns ``(mean, var)`` of ``C x`` with shape
    ``(n_warmups, horizon, d_y)``.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if not warmups or any(w.T < 1 for w in warmups):
        raise EmptySequence("every warm-up needs at least one step")
    d_c = model.ssm.d_c
    B = len(warmups)
    if d_c:
        if future_controls is None:
            raise ValueError("future controls are required for a controlled model")
        fc = torch.stack([as_tensor(np.asarray(u, dtype=np.float64).reshape(horizon, d_c)) for u in future_controls])
    else:
        fc = torch.zeros(B, horizon, 0, dtype=DTYPE)
    lengths = {w.T for w in warmups}
    if len(lengths) != 1:
        raise ValueError("warm-ups must share a common length")
    x0 = fit_initial_states(model, warmups, seed=rng_seed, iters=fit_iters, n_starts=n_starts)
    batch = Batch.from_sequences(warmups, model.ssm.d_y, d_c)
    with torch.no_grad():
        pred = model.predictor()
        T_all = batch.T + horizon
        eps0, eps_f, eps_x = model.draw_noise(n_mc, B, T_all, rng_seed + 1)
        x_init = x0.mean + torch.sqrt(x0.var) * eps0
        controls = torch.cat([batch.c, fc], dim=1)
        states = model.rollout(pred, x_init, controls, eps_f, eps_x)[batch.T :]
        ym = model.ssm.emission_mean(states)  # (H, n_mc, B, d_y)
        mean = ym.mean(1).permute(1, 0, 2)
        var = ym.var(1, unbiased=False).permute(1, 0, 2)
    return mean.numpy(), var.numpy()


def forecast(
    model: GPSSM,
    warmup: Sequence,
    horizon: int,
    n_mc: int = 64,
    rng_seed: int = 0,
    future_controls=None,
    fit_iters: int = 200,
    n_starts: int = 1,
):
    """Single-warm-up convenience wrapper around :func:`forecast_many`."""
    fc = None if future_controls is None else [future_controls]
    mean, var = forecast_many(model, [warmup], horizon, n_mc, rng_seed, fc, fit_iters, n_starts)
    return mean[0], var[0]


def rmse(pred, truth) -> float:
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise DimensionMismatch(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def persistence_forecast(warmup: Sequence, horizon: int) -> np.ndarray:
    """Repeat the last warm-up observation ``horizon`` times."""
    return np.repeat(warmup.y[-1:], horizon, axis=0)


# ---------------------------------------------------------------------------
# parameter counting
# ---------------------------------------------------------------------------


class InvalidSpec(ValueError):
    pass


@dataclass(frozen=True)
class ComplexitySpec:
    model_kind: str
    d_x: int
    m: int
    theta_gp_count: int = 0
    eta: int = 0
    c: int = 0
    Q_latent: int | None = None


@dataclass(frozen=True)
class ComplexityReport:
    model_kind: str
    params_total: int | float
    inducing_block: int | float
    complexity: str


def _num(x: Fraction):
    return int(x) if x.denominator == 1 else float(x)


def count_params(spec: ComplexitySpec) -> ComplexityReport:
    """Closed-form parameter counts and per-ELBO cost class of variational GPSSMs."""
    kind = str(spec.model_kind).upper()
    ints = {"d_x": spec.d_x, "m": spec.m, "theta_gp_count": spec.theta_gp_count, "eta": spec.eta, "c": spec.c}
    if any(not isinstance(v, (int, np.integer)) or isinstance(v, bool) for v in ints.values()):
        raise InvalidSpec("all counts must be integers")
    if spec.d_x < 1 or spec.m < 1 or min(spec.theta_gp_count, spec.eta, spec.c) < 0:
        raise InvalidSpec(f"counts out of range: {ints}")
    d, m, th, c = spec.d_x, spec.m, spec.theta_gp_count, spec.c
    if kind == "PRSSM":
        block = Fraction(m * d * (2 * d + m + 4), 2)
        total = c + d * th + block
        tag = "O(d_x*T*m^2)"
    elif kind == "ODGPSSM":
        Q = spec.Q_latent
        if Q is None or not isinstance(Q, (int, np.integer)) or Q < 1:
            raise InvalidSpec("ODGPSSM needs a positive integer Q_latent")
        block = Fraction(m * Q * (2 * Q + m + 4), 2)
        total = c + Q * th + block + Q * d
        tag = "O(Q*T*m^2)"
    elif kind == "EGPSSM":
        block = Fraction(m * (2 * d + m + 4), 2)
        total = c + th + block + spec.eta * d
        tag = "O(T*m^2)"
    else:
        raise InvalidSpec(f"unknown model kind {spec.model_kind!r}")
    return ComplexityReport(model_kind=kind, params_total=_num(Fraction(total)), inducing_block=_num(block), complexity=tag)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: GPSSM, path, extra: dict | None = None) -> None:
    """Write a JSON checkpoint: version, structural spec, unconstrained parameters."""
    state = {k: v.detach().tolist() for k, v in model.state_dict().items()}
    doc = {
        "version": CHECKPOINT_VERSION,
        "spec": asdict(model.spec),
        "parameters": state,
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True), encoding="utf-8")


def load_checkpoint(path) -> tuple[GPSSM, dict]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    spec = ModelSpec(**doc["spec"])
    model = build_model(spec)
    state = {k: torch.tensor(v, dtype=DTYPE) for k, v in doc["parameters"].items()}
    model.load_state_dict(state)
    return model, doc.get("extra", {})
