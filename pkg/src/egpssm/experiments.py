"""Experiment drivers shared by the CLI and the acceptance tests."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .data import Sequence, gen_kink, windows
from .models import (
    ComplexitySpec,
    ModelSpec,
    build_model,
    count_params,
    elbo,
    forecast_many,
    rmse,
)
from .training import TrainConfig, fit, smoothed


@dataclass
class KinkSetup:
    """Desk-scale version of the synthetic prediction experiment."""

    n_train: int = 10
    T: int = 50
    m: int = 50
    flow: str = "linear"
    kind: str = "egpssm"
    window: int = 3
    stride: int = 1
    warmup: int = 2
    iterations: int = 1500
    learning_rate: float = 0.05
    n_mc: int = 8
    forecast_mc: int = 64
    fit_iters: int = 150
    n_starts: int = 8
    process_noise_sd: float = 0.3
    emission_noise_sd: float = 0.3


@dataclass
class RunResult:
    seed: int
    rmse: float
    persistence_rmse: float
    elbo_first: float
    elbo_last_smoothed: float
    curve: list = field(default_factory=list, repr=False)


def one_step_forecasts(model, seq: Sequence, warmup: int, n_mc: int, seed: int, fit_iters: int, n_starts: int = 1):
    """Predict ``y_t`` from the ``warmup`` observations before it, for every ``t >= warmup``.

    Returns ``(pred, truth, persistence)`` arrays of shape ``(T - warmup, d_y)``.
    """
    if seq.T <= warmup:
        raise ValueError("sequence shorter than the warm-up window")
    starts = range(0, seq.T - warmup)
    wins = [seq.slice(s, s + warmup) for s in starts]
    fc = [seq.c[s + warmup : s + warmup + 1] for s in starts] if seq.d_c else None
    mean, _ = forecast_many(model, wins, 1, n_mc=n_mc, rng_seed=seed, future_controls=fc, fit_iters=fit_iters,
                           n_starts=n_starts)
    truth = seq.y[warmup:]
    persistence = seq.y[warmup - 1 : -1]
    return mean[:, 0], truth, persistence


def run_kink(seed: int, setup: KinkSetup | None = None, log_stream=None) -> RunResult:
    """Train on ``n_train`` kink sequences and score one-step forecasts on a fresh one."""
    setup = setup or KinkSetup()
    torch.manual_seed(seed)
    train = gen_kink(setup.n_train, setup.T, seed, residual=False)
    test = gen_kink(1, setup.T, 10_000 + seed, residual=False)[0]
    seqs = windows(train, setup.window, setup.stride)
    spec = ModelSpec(
        kind=setup.kind, d_x=2, d_y=2, m=setup.m, flow=setup.flow, n_sequences=len(seqs),
        process_noise_sd=setup.process_noise_sd, emission_noise_sd=setup.emission_noise_sd,
    )
    model = build_model(spec, seqs, seed=seed)
    cfg = TrainConfig(iterations=setup.iterations, learning_rate=setup.learning_rate, n_mc=setup.n_mc, seed=seed)
    res = fit(model, seqs, cfg, log_stream=log_stream)
    pred, truth, pers = one_step_forecasts(model, test, setup.warmup, setup.forecast_mc, seed, setup.fit_iters,
                                           setup.n_starts)
    sm = smoothed(res.curve)
    return RunResult(
        seed=seed,
        rmse=rmse(pred, truth),
        persistence_rmse=rmse(pers, truth),
        elbo_first=float(res.curve[0][1]),
        elbo_last_smoothed=float(sm[-1]),
        curve=res.curve,
    )


def summarize(values) -> tuple[float, float]:
    """Mean and standard error over repetitions."""
    v = np.asarray(values, dtype=np.float64)
    se = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0
    return float(v.mean()), se


# ---------------------------------------------------------------------------
# complexity benchmark
# ---------------------------------------------------------------------------

# hyperparameter counts used by the counting formulas: Matern/SE ARD kernel
# on d_x inputs has 1 + d_x entries, a 2-layer SAL flow has 8
def benchmark_counts(dims, m: int, models, eta: int = 8, c: int = 0, Q_latent: int = 2) -> list[dict]:
    rows = []
    for d in dims:
        for kind in models:
            name = {"egpssm": "EGPSSM", "baseline": "PRSSM", "prssm": "PRSSM", "odgpssm": "ODGPSSM"}[kind.lower()]
            spec = ComplexitySpec(
                model_kind=name,
                d_x=int(d),
                m=int(m),
                theta_gp_count=1 + int(d),
                eta=eta if name == "EGPSSM" else 0,
                c=c,
                Q_latent=Q_latent if name == "ODGPSSM" else None,
            )
            rep = count_params(spec)
            rows.append({"model": kind, **asdict(spec), **asdict(rep)})
    return rows


def time_elbo(kind: str, d_x: int, T: int = 200, m: int = 200, n_mc: int = 8, reps: int = 3, seed: int = 0) -> float:
    """Best-of-``reps`` wall time (ms) of one forward ELBO evaluation."""
    rng = np.random.default_rng(seed)
    seq = Sequence(y=rng.standard_normal((T, min(2, d_x))), name="bench")
    spec = ModelSpec(kind=kind, d_x=d_x, d_y=seq.d_y, m=m)
    model = build_model(spec, [seq], seed=seed)
    elbo(model, [seq], n_mc=n_mc, rng_seed=seed)  # warm-up
    best = float("inf")
    for r in range(reps):
        t0 = time.perf_counter()
        elbo(model, [seq], n_mc=n_mc, rng_seed=seed + r)
        best = min(best, time.perf_counter() - t0)
    return best * 1e3
