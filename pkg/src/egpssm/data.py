"""Sequences, the synthetic kink system, CSV ingestion and standardisation."""
from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np


class InvalidConfig(ValueError):
    pass


class ParseError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class MissingColumn(ValueError):
    pass


class SequenceTooShort(ValueError):
    pass


class DegenerateChannel(ValueError):
    pass


class EmptySequence(ValueError):
    pass


@dataclass
class Sequence:
    """One multivariate time series.

    ``y`` has shape ``(T, d_y)`` and ``c`` has shape ``(T, d_c)`` with ``d_c``
    possibly zero.  Row ``t`` of ``c`` is the control that drives the
    transition into step ``t``.  ``x`` optionally carries the true latent
    states of synthetic data.
    """

    y: np.ndarray
    c: np.ndarray = None
    name: str = ""
    x: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.float64)
        if y.ndim == 1:
            y = y[:, None]
        if y.ndim != 2 or y.shape[0] < 1:
            raise EmptySequence(f"sequence {self.name!r} has no time steps")
        c = np.zeros((y.shape[0], 0)) if self.c is None else np.asarray(self.c, dtype=np.float64)
        if c.ndim == 1:
            c = c[:, None]
        if c.shape[0] != y.shape[0]:
            raise ValueError(f"controls have {c.shape[0]} rows, observations {y.shape[0]}")
        if not (np.isfinite(y).all() and np.isfinite(c).all()):
            raise ValueError(f"sequence {self.name!r} contains non-finite values")
        self.y, self.c = y, c

    @property
    def T(self) -> int:
        return self.y.shape[0]

    @property
    def d_y(self) -> int:
        return self.y.shape[1]

    @property
    def d_c(self) -> int:
        return self.c.shape[1]

    def slice(self, start: int, stop: int, name: str | None = None) -> "Sequence":
        x = None if self.x is None else self.x[start:stop]
        return Sequence(self.y[start:stop], self.c[start:stop], name or f"{self.name}[{start}:{stop}]", x)


# ---------------------------------------------------------------------------
# synthetic kink system
# ---------------------------------------------------------------------------

KINK_PROCESS_VAR = math.sqrt(0.001)
KINK_OBS_VAR = math.sqrt(0.01)
KINK_X0_VAR = 0.1


def kink_f(x: np.ndarray) -> np.ndarray:
    """The modified kink function of a ``(..., 2)`` state."""
    x1, x2 = x[..., 0], x[..., 1]
    # 1 / (1 + exp(-2 x1)) written via tanh to avoid overflow
    sig = 0.5 * (1.0 + np.tanh(x1))
    return 0.8 + (x1 + 0.2) * (1.0 - 5.0 * sig) + x2


def kink_transition(x: np.ndarray, residual: bool = True) -> np.ndarray:
    """Noise-free state update ``[f; -0.5 f] (+ x)``."""
    fx = kink_f(x)
    out = np.stack([fx, -0.5 * fx], axis=-1)
    return out + x if residual else out


def gen_kink(
    n_seq: int,
    T: int,
    seed: int,
    *,
    residual: bool = True,
    noise_free: bool = False,
    process_var: float = KINK_PROCESS_VAR,
    obs_var: float = KINK_OBS_VAR,
    x0_var: float = KINK_X0_VAR,
    x0=None,
) -> list[Sequence]:
    """Simulate ``n_seq`` sequences of the 2-D kink system.

    ``residual=True`` keeps the ``+ x_t`` term of the state update.  Noise
    levels are covariance scales.  ``x0`` fixes the initial state instead of
    drawing it from ``N(0, x0_var I)``.
    """
    if n_seq < 1 or T < 1:
        raise InvalidConfig("n_seq and T must be >= 1")
    if min(process_var, obs_var, x0_var) < 0:
        raise InvalidConfig("noise variances must be non-negative")
    rng = np.random.default_rng(seed)
    q_sd = 0.0 if noise_free else math.sqrt(process_var)
    r_sd = 0.0 if noise_free else math.sqrt(obs_var)
    out = []
    for i in range(n_seq):
        if x0 is not None:
            x = np.asarray(x0, dtype=np.float64).copy()
        else:
            x = math.sqrt(x0_var) * rng.standard_normal(2)
        xs = np.empty((T, 2))
        ys = np.empty((T, 2))
        for t in range(T):
            x = kink_transition(x, residual) + q_sd * rng.standard_normal(2)
            xs[t] = x
            ys[t] = x + r_sd * rng.standard_normal(2)
        out.append(Sequence(y=ys, name=f"kink_{i:03d}", x=xs))
    return out


# ---------------------------------------------------------------------------
# CSV files
# ---------------------------------------------------------------------------


def _column_order(header: list[str], path) -> tuple[list[int], list[int]]:
    u_cols, y_cols = [], []
    for j, name in enumerate(header):
        key = name.strip().lower()
        if key.startswith("u") and key[1:].isdigit():
            u_cols.append((int(key[1:]), j))
        elif key.startswith("y") and key[1:].isdigit():
            y_cols.append((int(key[1:]), j))
        else:
            raise ParseError(f"unrecognised column {name!r} in {path}", line=1)
    if not y_cols:
        raise MissingColumn(f"{path}: no observation columns (y1, y2, ...)")
    for prefix, cols in (("u", u_cols), ("y", y_cols)):
        idx = sorted(k for k, _ in cols)
        if idx != list(range(1, len(idx) + 1)):
            raise MissingColumn(f"{path}: {prefix} columns must be numbered 1..{len(idx)}, got {idx}")
    return [j for _, j in sorted(u_cols)], [j for _, j in sorted(y_cols)]


def load_csv(path, name: str | None = None) -> Sequence:
    """Read ``u1..u_dc, y1..y_dy`` columns, one row per time step."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines()]
    # skip the reproducibility header emitted by save_csv
    body_start = 0
    while body_start < len(lines) and lines[body_start].startswith("#"):
        body_start += 1
    reader = csv.reader(lines[body_start:])
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("file is empty", line=body_start + 1) from None
    u_idx, y_idx = _column_order(header, path)
    rows = []
    for offset, row in enumerate(reader):
        line = body_start + 2 + offset
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} cells, found {len(row)}", line=line)
        try:
            vals = [float(cell) for cell in row]
        except ValueError:
            raise ParseError(f"non-numeric cell in {row!r}", line=line) from None
        if not all(math.isfinite(v) for v in vals):
            raise ParseError("non-finite value", line=line)
        rows.append(vals)
    if not rows:
        raise EmptySequence(f"{path}: no data rows")
    arr = np.array(rows, dtype=np.float64)
    return Sequence(y=arr[:, y_idx], c=arr[:, u_idx], name=name or path.stem)


def format_csv(seq: Sequence, header_comment: str | None = None) -> str:
    buf = io.StringIO()
    if header_comment:
        for line in header_comment.splitlines():
            buf.write(f"# {line}\n")
    cols = [f"u{i + 1}" for i in range(seq.d_c)] + [f"y{i + 1}" for i in range(seq.d_y)]
    buf.write(",".join(cols) + "\n")
    data = np.concatenate([seq.c, seq.y], axis=1)
    for row in data:
        buf.write(",".join(repr(float(v)) for v in row) + "\n")
    return buf.getvalue()


def save_csv(seq: Sequence, path, header_comment: str | None = None) -> None:
    """Write a sequence in the ``load_csv`` schema (floats in shortest round-trip form)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(format_csv(seq, header_comment))


def load_dir(directory) -> list[Sequence]:
    files = sorted(p for p in Path(directory).iterdir() if p.suffix == ".csv")
    return [load_csv(p) for p in files]


# ---------------------------------------------------------------------------
# standardisation and splitting
# ---------------------------------------------------------------------------


@dataclass
class Standardizer:
    y_mean: np.ndarray
    y_std: np.ndarray
    c_mean: np.ndarray
    c_std: np.ndarray

    @classmethod
    def fit(cls, seq: Sequence) -> "Standardizer":
        y_std, c_std = seq.y.std(axis=0), seq.c.std(axis=0)
        bad = [f"y{i + 1}" for i in np.flatnonzero(~(y_std > 1e-12))]
        bad += [f"u{i + 1}" for i in np.flatnonzero(~(c_std > 1e-12))]
        if bad:
            raise DegenerateChannel(f"zero-variance channels in training data: {', '.join(bad)}")
        return cls(seq.y.mean(axis=0), y_std, seq.c.mean(axis=0), c_std)

    def transform(self, seq: Sequence) -> Sequence:
        return replace(seq, y=(seq.y - self.y_mean) / self.y_std, c=(seq.c - self.c_mean) / self.c_std, x=None)

    def inverse(self, seq: Sequence) -> Sequence:
        return replace(seq, y=seq.y * self.y_std + self.y_mean, c=seq.c * self.c_std + self.c_mean, x=None)

    def inverse_y(self, y: np.ndarray) -> np.ndarray:
        return y * self.y_std + self.y_mean

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("y_mean", "y_std", "c_mean", "c_std")}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(*(np.asarray(d[k], dtype=np.float64) for k in ("y_mean", "y_std", "c_mean", "c_std")))


def split_standardize(seq: Sequence, frac: float = 0.5) -> tuple[Sequence, Sequence, Standardizer]:
    """Split at ``floor(T * frac)``, fit the standardiser on the first part."""
    if not 0.0 < frac < 1.0:
        raise InvalidConfig("frac must lie in (0, 1)")
    cut = int(math.floor(seq.T * frac))
    if cut < 2 or seq.T - cut < 1:
        raise SequenceTooShort(f"cannot split T={seq.T} at fraction {frac}")
    train, test = seq.slice(0, cut, f"{seq.name}_train"), seq.slice(cut, seq.T, f"{seq.name}_test")
    std = Standardizer.fit(train)
    return std.transform(train), std.transform(test), std


def windows(seqs: list[Sequence], length: int, stride: int | None = None) -> list[Sequence]:
    """Cut sequences into overlapping (or tiled) sub-sequences of ``length`` steps."""
    if length < 1:
        raise InvalidConfig("window length must be >= 1")
    stride = stride or length
    out = []
    for s in seqs:
        if s.T <= length:
            out.append(s)
            continue
        for start in range(0, s.T - length + 1, stride):
            out.append(s.slice(start, start + length))
    return out


def data_dir_from_env(var: str = "EGPSSM_DATA_DIR") -> Path | None:
    value = os.environ.get(var)
    return Path(value) if value else None
