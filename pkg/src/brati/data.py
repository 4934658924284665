"""CSV ingestion, standardisation, windowing, splitting and the on-disk container.

A *container* is a directory holding one split of windowed data::

    X.csv      values, one row per time step (windows stacked), empty cell = missing
    M.csv      observed mask (1 observed, 0 missing)
    I.csv      optional indicating mask of artificially hidden cells
    meta.json  T, D, columns, split, scenario, rate, seed, standardizer stats

Values in ``X.csv`` are in raw units; the standardizer stored in ``meta.json``
(fitted on the training split only) maps them to model space.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .layers import ConfigurationError

MISSING_TOKENS = {"", "nan", "na", "null"}


class CsvParseError(ValueError):
    pass


class ContainerError(ValueError):
    """A container on disk is inconsistent with its own metadata."""


@dataclass
class RawTable:
    columns: list[str]
    values: np.ndarray  # (rows, D), NaN = missing
    timestamps: list[str] | None = None

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[1] < 1:
            raise ValueError(f"table needs a (rows, D >= 1) matrix, got {self.values.shape}")
        if len(self.columns) != self.values.shape[1]:
            raise ValueError("column names do not match value width")

    @property
    def mask(self) -> np.ndarray:
        return (~np.isnan(self.values)).astype(np.float64)


def _parse_cell(token: str, row: int, col: int) -> float:
    token = token.strip()
    if token.lower() in MISSING_TOKENS:
        return math.nan
    try:
        return float(token)
    except ValueError:
        raise CsvParseError(f"non-numeric value {token!r} at row {row}, column {col + 1}") from None


def load_csv(path, timestamp_column: str | None = None) -> RawTable:
    """Read a header-first CSV; ``timestamp_column`` (if named) is kept as text."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvParseError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        ts_idx = None
        if timestamp_column is not None:
            if timestamp_column not in header:
                raise CsvParseError(f"{path}: no column named {timestamp_column!r}")
            ts_idx = header.index(timestamp_column)
        rows, stamps = [], []
        for lineno, record in enumerate(reader, start=2):
            if not record:
                continue
            if len(record) != len(header):
                raise CsvParseError(f"{path}: row {lineno} has {len(record)} cells, expected {len(header)}")
            if ts_idx is not None:
                stamps.append(record[ts_idx])
            rows.append([_parse_cell(tok, lineno, j) for j, tok in enumerate(record) if j != ts_idx])
    columns = [h for j, h in enumerate(header) if j != ts_idx]
    values = np.array(rows, dtype=np.float64).reshape(len(rows), len(columns))
    return RawTable(columns=columns, values=values, timestamps=stamps if ts_idx is not None else None)


def write_csv(path, columns, values: np.ndarray, integer: bool = False) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in values:
            if integer:
                writer.writerow([str(int(v)) for v in row])
            else:
                writer.writerow(["" if math.isnan(v) else format(v, ".17g") for v in row])


# ----------------------------------------------------------------------
@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def inverse(self, z: np.ndarray) -> np.ndarray:
        return z * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(mean=np.asarray(d["mean"], dtype=np.float64), std=np.asarray(d["std"], dtype=np.float64))

    @classmethod
    def identity(cls, D: int) -> "Standardizer":
        return cls(mean=np.zeros(D), std=np.ones(D))


def fit_standardizer(windows: np.ndarray) -> Standardizer:
    """Per-feature mean/std over observed (non-NaN) entries of ``(..., D)`` values."""
    flat = windows.reshape(-1, windows.shape[-1])
    observed = ~np.isnan(flat)
    counts = observed.sum(axis=0)
    if np.any(counts == 0):
        bad = np.flatnonzero(counts == 0).tolist()
        raise ConfigurationError(f"features {bad} have no observed training values")
    filled = np.where(observed, flat, 0.0)
    mean = filled.sum(axis=0) / counts
    var = (np.where(observed, flat - mean, 0.0) ** 2).sum(axis=0) / counts
    std = np.sqrt(var)
    std[std < 1e-12] = 1.0
    return Standardizer(mean=mean, std=std)


def make_windows(values: np.ndarray, T: int, stride: int | None = None) -> np.ndarray:
    """Cut ``(rows, D)`` into ``(n, T, D)`` windows; a short tail is dropped."""
    if isinstance(values, RawTable):
        values = values.values
    stride = T if stride is None else stride
    rows = values.shape[0]
    if T < 1 or stride < 1:
        raise ConfigurationError(f"window length and stride must be positive (T={T}, stride={stride})")
    if T > rows:
        raise ConfigurationError(f"window length {T} exceeds the {rows} available rows")
    starts = range(0, rows - T + 1, stride)
    return np.stack([values[s:s + T] for s in starts])


def fraction_counts(n: int, fractions) -> list[int]:
    """Largest-remainder allocation of ``n`` items; counts are within 1 of ``n * f``."""
    exact = [n * f for f in fractions]
    counts = [int(math.floor(x)) for x in exact]
    order = sorted(range(len(exact)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


DEFAULT_FRACTIONS = (0.68, 0.12, 0.20)


def split(windows: np.ndarray, fractions=DEFAULT_FRACTIONS, seed: int = 0) -> dict[str, np.ndarray]:
    """Shuffle windows with ``seed`` and partition them into train/val/test."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ConfigurationError(f"split fractions must be three nonnegative values summing to 1, got {fractions}")
    counts = fraction_counts(len(windows), fractions)
    if 0 in counts:
        raise ConfigurationError(f"split of {len(windows)} windows by {fractions} leaves an empty part {counts}")
    order = np.random.default_rng(seed).permutation(len(windows))
    a, b = counts[0], counts[0] + counts[1]
    return {"train": windows[order[:a]], "val": windows[order[a:b]], "test": windows[order[b:]]}


def synth_generate(D: int = 4, rows: int = 4800, seed: int = 0, noise: float = 0.05, lag: int = 3) -> RawTable:
    """Fully observed correlated sinusoids; feature 1 is feature 0 delayed by ``lag`` steps."""
    if D < 2:
        raise ConfigurationError("synthetic data needs at least two features")
    rng = np.random.default_rng(seed)
    t = np.arange(rows + lag, dtype=np.float64)
    periods = rng.uniform(12.0, 60.0, size=D)
    phases = rng.uniform(0.0, 2 * np.pi, size=D)
    base = np.sin(2 * np.pi * t[:, None] / periods + phases)
    slow = np.sin(2 * np.pi * t / 300.0 + rng.uniform(0, 2 * np.pi))
    values = np.empty((rows, D))
    values[:, 0] = base[lag:, 0] + 0.5 * slow[lag:]
    values[:, 1] = base[:rows, 0] + 0.5 * slow[:rows]
    for d in range(2, D):
        values[:, d] = 0.6 * base[lag:, d] + 0.4 * values[:, d - 1]
    values += noise * rng.standard_normal(values.shape)
    return RawTable(columns=[f"f{d}" for d in range(D)], values=values)


# ----------------------------------------------------------------------
@dataclass
class DatasetContainer:
    values: np.ndarray  # (n, T, D) raw units, NaN = missing
    indicating: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.values.shape[1]

    @property
    def D(self) -> int:
        return self.values.shape[2]

    @property
    def mask(self) -> np.ndarray:
        return (~np.isnan(self.values)).astype(np.float64)

    @property
    def columns(self) -> list[str]:
        return self.meta.get("columns") or [f"f{d}" for d in range(self.D)]

    @property
    def standardizer(self) -> Standardizer:
        stats = self.meta.get("standardizer")
        return Standardizer.from_dict(stats) if stats else Standardizer.identity(self.D)

    def standardized(self) -> np.ndarray:
        return self.standardizer.transform(self.values)

    def with_indicating(self, indicating: np.ndarray, **meta) -> "DatasetContainer":
        return DatasetContainer(self.values, indicating, {**self.meta, **meta})


def write_container(path, container: DatasetContainer) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    n, T, D = container.values.shape
    if container.indicating is not None:
        ind = container.indicating
        if ind.shape != container.values.shape:
            raise ContainerError(f"indicating mask {ind.shape} does not match values {container.values.shape}")
        if np.any((ind == 1) & (container.mask == 0)):
            raise ContainerError("indicating mask selects unobserved cells")
    cols = container.columns
    write_csv(path / "X.csv", cols, container.values.reshape(n * T, D))
    write_csv(path / "M.csv", cols, container.mask.reshape(n * T, D), integer=True)
    ind_path = path / "I.csv"
    if container.indicating is not None:
        write_csv(ind_path, cols, container.indicating.reshape(n * T, D), integer=True)
    elif ind_path.exists():
        ind_path.unlink()
    meta = {**container.meta, "T": T, "D": D, "n_windows": n, "columns": cols}
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def _read_mask(path: Path, shape) -> np.ndarray:
    table = load_csv(path)
    if np.isnan(table.values).any() or not np.isin(table.values, (0.0, 1.0)).all():
        raise ContainerError(f"{path}: mask entries must all be 0 or 1")
    return table.values.reshape(shape)


def read_container(path) -> DatasetContainer:
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.exists():
        raise ContainerError(f"{path} is not a dataset container (no meta.json)")
    meta = json.loads(meta_path.read_text())
    T, D = int(meta["T"]), int(meta["D"])
    table = load_csv(path / "X.csv")
    if table.values.shape[1] != D or table.values.shape[0] % T:
        raise ContainerError(f"{path}: X.csv shape {table.values.shape} inconsistent with T={T}, D={D}")
    values = table.values.reshape(-1, T, D)
    observed = _read_mask(path / "M.csv", values.shape)
    if not np.array_equal(observed, (~np.isnan(values)).astype(np.float64)):
        raise ContainerError(f"{path}: M.csv disagrees with the empty cells of X.csv")
    indicating = None
    if (path / "I.csv").exists():
        indicating = _read_mask(path / "I.csv", values.shape)
        if np.any((indicating == 1) & (observed == 0)):
            raise ContainerError(f"{path}: I.csv selects cells that are not observed")
    meta.setdefault("columns", table.columns)
    return DatasetContainer(values=values, indicating=indicating, meta=meta)


def prepare_dataset(table: RawTable, out_dir, T: int, stride: int | None = None,
                    fractions=DEFAULT_FRACTIONS, seed: int = 0, source: str = "csv") -> dict[str, DatasetContainer]:
    """Window, split and standardise ``table``; write ``out_dir/{train,val,test}``."""
    windows = make_windows(table.values, T, stride)
    parts = split(windows, fractions, seed)
    stats = fit_standardizer(parts["train"])
    out = {}
    for name, vals in parts.items():
        meta = {
            "split": name, "source": source, "stride": stride or T, "split_seed": seed,
            "columns": list(table.columns), "standardizer": stats.to_dict(),
            "scenario": None, "rate": None, "seed": None,
        }
        container = DatasetContainer(values=vals, meta=meta)
        write_container(Path(out_dir) / name, container)
        out[name] = container
    return out
