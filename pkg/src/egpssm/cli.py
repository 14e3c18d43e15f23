"""Command-line interface: ``gen-data``, ``train``, ``predict`` and ``benchmark``.

Settings come from built-in defaults, then an optional INI file with sections
``[model] [kernel] [flow] [train] [data]``, then ``--set section.key=value``
overrides and the dedicated flags.  Every artifact embeds the resolved
configuration and seed.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .data import (
    Sequence,
    Standardizer,
    gen_kink,
    load_csv,
    load_dir,
    save_csv,
    windows,
)
from .experiments import benchmark_counts, time_elbo
from .models import (
    ModelSpec,
    build_model,
    forecast_many,
    load_checkpoint,
    persistence_forecast,
    rmse,
    save_checkpoint,
)
from .numerics import DimensionMismatch
from .svg import line_chart
from .training import TrainConfig, fit

log = logging.getLogger("egpssm")

DEFAULTS: dict[str, dict] = {
    "model": {
        "kind": "egpssm",
        "d_x": 2,
        "m": 50,
        "jitter": 1e-6,
        "process_noise_sd": 0.05,
        "emission_noise_sd": 0.1,
        "init": "uniform",
    },
    "kernel": {"family": "matern52"},
    "flow": {"kind": "linear", "n_layers": 2},
    "train": {
        "iterations": 1000,
        "learning_rate": 0.01,
        "adam_beta1": 0.9,
        "adam_beta2": 0.99,
        "adam_eps": 1e-8,
        "n_mc": 8,
        "seed": 0,
        "log_every": 50,
        "clip_norm": 10.0,
        "batch_size": 0,
        "window": 0,
        "stride": 0,
    },
    "data": {"path": "", "standardize": False, "split_frac": 0.0},
}


class CliError(RuntimeError):
    pass


def _coerce(default, raw: str):
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw.strip()


def resolve_config(path=None, overrides=()) -> dict:
    """Merge defaults, an INI file and ``section.key=value`` overrides."""
    cfg = {sec: dict(vals) for sec, vals in DEFAULTS.items()}
    pairs = []
    if path:
        parser = configparser.ConfigParser()
        if not parser.read(path, encoding="utf-8"):
            raise CliError(f"cannot read config file {path}")
        for sec in parser.sections():
            for key, raw in parser.items(sec):
                pairs.append((sec, key, raw))
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ValueError(f"override {item!r} is not of the form section.key=value")
        lhs, raw = item.split("=", 1)
        sec, key = lhs.split(".", 1)
        pairs.append((sec.strip(), key.strip(), raw))
    for sec, key, raw in pairs:
        if sec not in cfg:
            raise ValueError(f"unknown config section [{sec}]")
        if key not in cfg[sec]:
            raise ValueError(f"unknown key {key!r} in section [{sec}]")
        cfg[sec][key] = _coerce(DEFAULTS[sec][key], raw)
    return cfg


def header_text(command: str, cfg: dict) -> str:
    doc = {"egpssm": __version__, "command": command, "config": cfg}
    return json.dumps(doc, sort_keys=True)


def _write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_rows(path: Path, rows: list[dict], header: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    buf.write(f"# {header}\n")
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    path.write_text(buf.getvalue(), encoding="utf-8")


def _load_sequences(path) -> list[Sequence]:
    p = Path(path)
    if p.is_dir():
        seqs = load_dir(p)
    elif p.is_file():
        seqs = [load_csv(p)]
    else:
        raise CliError(f"no such data file or directory: {p}")
    if not seqs:
        raise CliError(f"no CSV files found in {p}")
    return seqs


def _concat(seqs: list[Sequence]) -> Sequence:
    return Sequence(y=np.concatenate([s.y for s in seqs]), c=np.concatenate([s.c for s in seqs]), name="all")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = {
        "seed": args.seed,
        "n_seq": args.n_seq,
        "len": args.len,
        "residual": not args.no_residual,
        "noise_free": args.noise_free,
    }
    seqs = gen_kink(args.n_seq, args.len, args.seed, residual=cfg["residual"], noise_free=args.noise_free)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    head = header_text("gen-data", cfg)
    for s in seqs:
        save_csv(s, out / f"{s.name}.csv", header_comment=head)
        if args.with_states:
            save_csv(Sequence(y=s.x, name=s.name), out / "states" / f"{s.name}.csv", header_comment=head)
    print(f"wrote {len(seqs)} sequences to {out}")
    return 0


def _prepare_training_data(cfg: dict):
    dcfg = cfg["data"]
    if not dcfg["path"]:
        raise CliError("no training data: pass --data or set [data] path")
    seqs = _load_sequences(dcfg["path"])
    std = None
    if dcfg["split_frac"] > 0:
        if not 0 < dcfg["split_frac"] < 1:
            raise ValueError("split_frac must lie in (0, 1)")
        cut_seqs = []
        for s in seqs:
            cut = int(np.floor(s.T * dcfg["split_frac"]))
            cut_seqs.append(s.slice(0, cut, s.name))
        seqs = cut_seqs
    if dcfg["standardize"]:
        std = Standardizer.fit(_concat(seqs))
        seqs = [std.transform(s) for s in seqs]
    tcfg = cfg["train"]
    if tcfg["window"] > 0:
        seqs = windows(seqs, tcfg["window"], tcfg["stride"] or None)
    return seqs, std


def cmd_train(args) -> int:
    cfg = args.resolved
    seqs, std = _prepare_training_data(cfg)
    mcfg, tcfg = cfg["model"], cfg["train"]
    d_y, d_c = seqs[0].d_y, seqs[0].d_c
    spec = ModelSpec(
        kind=mcfg["kind"],
        d_x=mcfg["d_x"],
        d_y=d_y,
        d_c=d_c,
        m=mcfg["m"],
        kernel=cfg["kernel"]["family"],
        flow=cfg["flow"]["kind"],
        n_layers=cfg["flow"]["n_layers"],
        jitter=mcfg["jitter"],
        n_sequences=len(seqs),
        process_noise_sd=mcfg["process_noise_sd"],
        emission_noise_sd=mcfg["emission_noise_sd"],
    )
    torch.manual_seed(tcfg["seed"])
    model = build_model(spec, seqs, seed=tcfg["seed"], init=mcfg["init"])
    tc = TrainConfig(
        iterations=tcfg["iterations"],
        learning_rate=tcfg["learning_rate"],
        adam_beta1=tcfg["adam_beta1"],
        adam_beta2=tcfg["adam_beta2"],
        adam_eps=tcfg["adam_eps"],
        n_mc=tcfg["n_mc"],
        seed=tcfg["seed"],
        log_every=tcfg["log_every"],
        clip_norm=tcfg["clip_norm"] if tcfg["clip_norm"] > 0 else None,
        batch_size=tcfg["batch_size"] or None,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    head = header_text("train", cfg)
    with open(out / "train_log.csv", "w", encoding="utf-8") as fh:
        fh.write(f"# {head}\n")
        result = fit(model, seqs, tc, log_stream=fh)
    extra = {"config": cfg, "seed": tcfg["seed"], "command": "train"}
    if std is not None:
        extra["standardizer"] = std.to_dict()
    save_checkpoint(model, out / "checkpoint.json", extra=extra)
    final = result.curve[-1][1]
    _write_json(
        out / "train_metrics.json",
        {"config": cfg, "seed": tcfg["seed"], "elbo_final": final, "params_total": model.count_trainable(),
         "elbo_curve": "train_log.csv"},
    )
    print(f"trained {spec.kind} (d_x={spec.d_x}, m={spec.m}); final ELBO {final:.4f}; wrote {out}")
    return 0


def cmd_predict(args) -> int:
    model, extra = load_checkpoint(args.checkpoint)
    seqs = _load_sequences(args.data)
    ssm = model.ssm
    for s in seqs:
        if s.d_y != ssm.d_y or s.d_c != ssm.d_c:
            raise DimensionMismatch(
                f"{s.name}: data has d_y={s.d_y}, d_c={s.d_c}; checkpoint expects d_y={ssm.d_y}, d_c={ssm.d_c}"
            )
    std = Standardizer.from_dict(extra["standardizer"]) if "standardizer" in extra else None
    if std is not None:
        seqs = [std.transform(s) for s in seqs]
    W, H = args.warmup, args.horizon
    rows, per_seq, pers_seq = [], [], []
    for k, s in enumerate(seqs):
        start = int(np.floor(s.T * args.split_frac)) if args.split_frac > 0 else W
        if start < W or start >= s.T:
            raise CliError(f"{s.name}: need at least {W} warm-up steps before the forecast start")
        if args.mode == "rolling":
            idx = list(range(start, s.T))
            wins = [s.slice(t - W, t) for t in idx]
            fc = [s.c[t : t + 1] for t in idx] if s.d_c else None
            mean, var = forecast_many(model, wins, 1, args.n_mc, args.seed, fc, args.fit_iters)
            mean, var = mean[:, 0], var[:, 0]
            truth = s.y[idx]
            pers = s.y[[t - 1 for t in idx]]
        else:
            h = min(H, s.T - start)
            warm = s.slice(start - W, start)
            fc = [s.c[start : start + h]] if s.d_c else None
            mean, var = forecast_many(model, [warm], h, args.n_mc, args.seed, fc, args.fit_iters)
            mean, var = mean[0], var[0]
            idx = list(range(start, start + h))
            truth = s.y[start : start + h]
            pers = persistence_forecast(warm, h)
        per_seq.append(rmse(mean, truth))
        pers_seq.append(rmse(pers, truth))
        out_mean = std.inverse_y(mean) if std is not None else mean
        out_sd = np.sqrt(var) * (std.y_std if std is not None else 1.0)
        for j, t in enumerate(idx):
            row = {"sequence": s.name, "t": t}
            row.update({f"y{i + 1}_mean": float(out_mean[j, i]) for i in range(ssm.d_y)})
            row.update({f"y{i + 1}_sd": float(out_sd[j, i]) for i in range(ssm.d_y)})
            rows.append(row)
    cfg = {
        "checkpoint": str(args.checkpoint),
        "data": str(args.data),
        "warmup": W,
        "horizon": H,
        "mode": args.mode,
        "split_frac": args.split_frac,
        "n_mc": args.n_mc,
        "fit_iters": args.fit_iters,
        "train_config": extra.get("config"),
    }
    out = Path(args.out)
    head = header_text("predict", {**cfg, "seed": args.seed})
    _write_rows(out / "predictions.csv", rows, head)
    vals = np.asarray(per_seq)
    _write_json(
        out / "metrics.json",
        {
            "config": cfg,
            "seed": args.seed,
            "rmse_mean": float(vals.mean()),
            "rmse_std": float(vals.std()),
            "rmse_per_sequence": dict(zip([s.name for s in seqs], per_seq)),
            "persistence_rmse_mean": float(np.mean(pers_seq)),
            "params_total": model.count_trainable(),
            "units": "standardized" if std is not None else "data",
        },
    )
    print(f"RMSE {vals.mean():.4f} +/- {vals.std():.4f} over {len(seqs)} sequence(s); wrote {out}")
    return 0


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("dimensions must be positive integers")
    return vals


def _model_list(text: str) -> list[str]:
    vals = [v.strip().lower() for v in text.split(",") if v.strip()]
    bad = [v for v in vals if v not in ("egpssm", "baseline")]
    if not vals or bad:
        raise argparse.ArgumentTypeError(f"models must be drawn from egpssm,baseline; got {text!r}")
    return vals


def cmd_benchmark(args) -> int:
    cfg = {
        "dims": args.dims,
        "m": args.m,
        "models": args.models,
        "T": args.T,
        "n_mc": args.n_mc,
        "reps": args.reps,
        "eta": args.eta,
        "c": args.c,
        "timing": not args.no_timing,
    }
    head = header_text("benchmark", {**cfg, "seed": args.seed})
    out = Path(args.out)
    counts = benchmark_counts(args.dims, args.m, args.models, eta=args.eta, c=args.c)
    for r in counts:
        r.pop("Q_latent")
    _write_rows(out / "counts.csv", counts, head)
    report = {
        "config": cfg,
        "seed": args.seed,
        "params_total": {f"{r['model']}:{r['d_x']}": r["params_total"] for r in counts},
    }
    if not args.no_timing:
        timing = []
        for kind in args.models:
            for d in args.dims:
                ms = time_elbo(kind, d, T=args.T, m=args.m, n_mc=args.n_mc, reps=args.reps, seed=args.seed)
                log.info("%s d_x=%d: %.1f ms", kind, d, ms)
                timing.append({"model": kind, "d_x": d, "m": args.m, "T": args.T, "elbo_wall_ms": ms})
        _write_rows(out / "timing.csv", timing, head)
        report["elbo_wall_ms"] = {f"{r['model']}:{r['d_x']}": r["elbo_wall_ms"] for r in timing}
        if args.svg:
            series = {
                kind: ([r["d_x"] for r in timing if r["model"] == kind], [r["elbo_wall_ms"] for r in timing if r["model"] == kind])
                for kind in args.models
            }
            svg = line_chart(series, title=f"ELBO evaluation time (T={args.T}, m={args.m})",
                             xlabel="d_x", ylabel="wall time [ms]", comment=head)
            (out / "timing.svg").write_text(svg, encoding="utf-8")
    _write_json(out / "benchmark.json", report)
    print(f"wrote {len(counts)} count rows to {out / 'counts.csv'}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="egpssm", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"egpssm {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="simulate kink-system sequences as CSV files")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-seq", type=int, default=10)
    g.add_argument("--len", type=int, default=50)
    g.add_argument("--out", required=True)
    g.add_argument("--no-residual", action="store_true", help="drop the +x_t term of the state update")
    g.add_argument("--noise-free", action="store_true")
    g.add_argument("--with-states", action="store_true", help="also write the latent states")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="fit a model and write a checkpoint plus training log")
    t.add_argument("--config", help="INI file with [model] [kernel] [flow] [train] [data] sections")
    t.add_argument("--data", help="CSV file or directory (overrides [data] path)")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--iterations", type=int)
    t.add_argument("--model", choices=["egpssm", "baseline"])
    t.add_argument("--flow", choices=["linear", "sal"])
    t.add_argument("--d-x", type=int)
    t.add_argument("--m", type=int)
    t.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("predict", help="forecast from a checkpoint and score RMSE")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--warmup", type=int, default=10)
    r.add_argument("--horizon", type=int, default=50)
    r.add_argument("--mode", choices=["horizon", "rolling"], default="horizon")
    r.add_argument("--split-frac", type=float, default=0.0, help="forecast from floor(T*frac) instead of after the warm-up")
    r.add_argument("--n-mc", type=int, default=64)
    r.add_argument("--fit-iters", type=int, default=200)
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(func=cmd_predict)

    b = sub.add_parser("benchmark", help="parameter counts and ELBO wall time versus d_x")
    b.add_argument("--dims", type=_int_list, default=[2, 8, 32])
    b.add_argument("--m", type=int, default=200)
    b.add_argument("--models", type=_model_list, default=["egpssm", "baseline"])
    b.add_argument("--T", type=int, default=200)
    b.add_argument("--n-mc", type=int, default=8)
    b.add_argument("--reps", type=int, default=3)
    b.add_argument("--eta", type=int, default=8, help="flow parameters per dimension in the counts")
    b.add_argument("--c", type=int, default=0, help="shared parameter count c in the counts")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--no-timing", action="store_true")
    b.add_argument("--svg", action="store_true")
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_benchmark)
    return p


def _resolve_train(args, parser) -> None:
    overrides = list(args.set)
    for flag, key in (
        ("data", "data.path"),
        ("seed", "train.seed"),
        ("iterations", "train.iterations"),
        ("model", "model.kind"),
        ("flow", "flow.kind"),
        ("d_x", "model.d_x"),
        ("m", "model.m"),
    ):
        val = getattr(args, flag)
        if val is not None:
            overrides.append(f"{key}={val}")
    try:
        args.resolved = resolve_config(args.config, overrides)
    except ValueError as exc:
        parser.error(str(exc))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        if args.command == "train":
            _resolve_train(args, parser)
        return args.func(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (CliError, DimensionMismatch, ValueError, OSError, FloatingPointError) as exc:
        print(f"egpssm {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


run_command = main


if __name__ == "__main__":
    sys.exit(main())
