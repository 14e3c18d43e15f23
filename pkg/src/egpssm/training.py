"""ELBO maximisation with Adam over a flat view of all trainable parameters."""
from __future__ import annotations

import io
import logging
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import InvalidConfig, Sequence
from .models import GPSSM, X0View
from .numerics import DTYPE, DimensionMismatch

log = logging.getLogger(__name__)

LOG_HEADER = "iteration,elbo,kl_u,kl_x0,wall_ms"


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 1000
    learning_rate: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    adam_eps: float = 1e-8
    n_mc: int = 8
    seed: int = 0
    log_every: int = 50
    clip_norm: float | None = 10.0
    batch_size: int | None = None

    def validate(self) -> "TrainConfig":
        if not isinstance(self.iterations, (int, np.integer)) or self.iterations < 1:
            raise InvalidConfig("iterations must be >= 1")
        if not self.learning_rate > 0:
            raise InvalidConfig("learning_rate must be positive")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise InvalidConfig("Adam betas must lie in (0, 1)")
        if not self.adam_eps > 0:
            raise InvalidConfig("adam_eps must be positive")
        if self.n_mc < 1 or self.log_every < 1:
            raise InvalidConfig("n_mc and log_every must be >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise InvalidConfig("batch_size must be >= 1")
        return self


@dataclass
class ParamVector:
    """Flat float64 vector with a deterministic ``name -> slice`` index."""

    values: np.ndarray
    index: dict[str, slice]
    shapes: dict[str, tuple]

    @classmethod
    def from_model(cls, model: torch.nn.Module, grads: bool = False) -> "ParamVector":
        chunks, index, shapes, pos = [], {}, {}, 0
        for name, p in model.named_parameters():
            if not p.requires_grad:
                continue
            src = p.grad if grads else p
            arr = np.zeros(p.numel()) if src is None else src.detach().reshape(-1).numpy().astype(np.float64)
            chunks.append(arr)
            index[name] = slice(pos, pos + p.numel())
            shapes[name] = tuple(p.shape)
            pos += p.numel()
        values = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(values, index, shapes)

    def like(self, values: np.ndarray) -> "ParamVector":
        if values.shape != self.values.shape:
            raise DimensionMismatch(f"expected {self.values.shape}, got {values.shape}")
        return ParamVector(values, self.index, self.shapes)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[self.index[name]].reshape(self.shapes[name])

    def __len__(self) -> int:
        return self.values.size

    def names(self) -> list[str]:
        return list(self.index)

    def assign_to(self, model: torch.nn.Module) -> None:
        params = dict(model.named_parameters())
        with torch.no_grad():
            for name, sl in self.index.items():
                params[name].copy_(torch.from_numpy(self.values[sl].reshape(self.shapes[name])))


def _objective(model: GPSSM, seqs, n_mc, seed, index=None):
    if index is None:
        return model.elbo_terms(seqs, n_mc, seed)
    sub = [seqs[i] for i in index]
    # rows of the full q(x0) table, so gradients reach the selected entries
    x0 = X0View(model.x0.mean[index], model.x0.logvar[index])
    total, ll, klu, klx = model.elbo_terms(sub, n_mc, seed, x0=x0)
    scale = len(seqs) / len(sub)
    ll, klx = ll * scale, klx * scale
    return ll - klu - klx, ll, klu, klx


def value_and_grad(model: GPSSM, sequences: list[Sequence], n_mc: int, seed: int) -> tuple[float, ParamVector]:
    """ELBO and its gradient w.r.t. every trainable parameter (noise fixed by ``seed``)."""
    value, grad, _ = _value_and_grad_parts(model, sequences, n_mc, seed)
    return value, grad


def _value_and_grad_parts(model, sequences, n_mc, seed, index=None):
    model.zero_grad(set_to_none=True)
    total, ll, klu, klx = _objective(model, sequences, n_mc, seed, index)
    total.backward()
    grad = ParamVector.from_model(model, grads=True)
    model.zero_grad(set_to_none=True)
    if not np.all(np.isfinite(grad.values)):
        bad = [n for n, sl in grad.index.items() if not np.all(np.isfinite(grad.values[sl]))]
        raise NonFiniteGradient(f"non-finite gradient in {bad}")
    ll, klu, klx = (float(v.detach()) for v in (ll, klu, klx))
    return ll - klu - klx, grad, (ll, klu, klx)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n))


def adam_step(params: ParamVector, grad: ParamVector, state: AdamState, cfg: TrainConfig, t: int):
    """One bias-corrected Adam ascent step; returns new ``(params, state)``."""
    if len(params) != len(grad) or state.m.shape != params.values.shape:
        raise DimensionMismatch("parameter, gradient and moment sizes differ")
    if t < 1:
        raise ValueError("step index t starts at 1")
    g = grad.values
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    m = b1 * state.m + (1.0 - b1) * g
    v = b2 * state.v + (1.0 - b2) * g * g
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    new = params.values + cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    return params.like(new), AdamState(m, v)


def iteration_seed(seed: int, it: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(it)]).generate_state(1)[0])


def clip_by_norm(grad: ParamVector, max_norm: float | None) -> ParamVector:
    if max_norm is None:
        return grad
    norm = float(np.linalg.norm(grad.values))
    if norm > max_norm:
        return grad.like(grad.values * (max_norm / norm))
    return grad


@dataclass
class FitResult:
    model: GPSSM
    curve: list = field(default_factory=list)  # (iteration, elbo)
    log_text: str = ""


def fit(model: GPSSM, sequences: list[Sequence], cfg: TrainConfig, log_stream=None) -> FitResult:
    """Run ``cfg.iterations`` Adam steps on the doubly-stochastic ELBO.

    Every iteration draws fresh noise from a seed derived from ``cfg.seed`` and
    the iteration number, so runs are reproducible.  A line
    ``iteration,elbo,kl_u,kl_x0,wall_ms`` is appended to ``log_stream`` (and to
    the returned ``log_text``) every ``cfg.log_every`` iterations.
    """
    cfg.validate()
    buf = io.StringIO()
    buf.write(LOG_HEADER + "\n")
    if log_stream is not None:
        log_stream.write(LOG_HEADER + "\n")
    params = ParamVector.from_model(model)
    state = AdamState.zeros(len(params))
    batch_rng = np.random.default_rng(cfg.seed)
    n = len(sequences)
    curve = []
    t0 = time.perf_counter()
    for it in range(1, cfg.iterations + 1):
        index = None
        if cfg.batch_size is not None and cfg.batch_size < n:
            index = np.sort(batch_rng.choice(n, size=cfg.batch_size, replace=False)).tolist()
        value, grad, (ll, klu, klx) = _value_and_grad_parts(model, sequences, cfg.n_mc, iteration_seed(cfg.seed, it), index)
        curve.append((it, value))
        if it == 1 or it % cfg.log_every == 0 or it == cfg.iterations:
            line = f"{it},{value!r},{klu!r},{klx!r},{(time.perf_counter() - t0) * 1e3:.1f}"
            buf.write(line + "\n")
            if log_stream is not None:
                log_stream.write(line + "\n")
                log_stream.flush()
            log.debug("iter %d elbo %.4f", it, value)
        params, state = adam_step(params, clip_by_norm(grad, cfg.clip_norm), state, cfg, it)
        params.assign_to(model)
    return FitResult(model=model, curve=curve, log_text=buf.getvalue())


def smoothed(curve, window: int = 50) -> np.ndarray:
    """Trailing moving average of the ELBO values of a training curve."""
    vals = np.array([v for _, v in curve], dtype=np.float64)
    if vals.size == 0:
        return vals
    c = np.cumsum(np.insert(vals, 0, 0.0))
    out = np.empty_like(vals)
    for i in range(vals.size):
        lo = max(0, i + 1 - window)
        out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
    return out
