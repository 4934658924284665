"""Artificial missingness: MCAR cells, fixed-length runs and random-length runs.

Masks are ``(T, D)`` arrays of 0/1 with 1 meaning *observed* (``M``) or
*artificially hidden* (``I``).  The number of hidden cells is always exactly
``round(rate * observed)`` (round half to even).

Sequence protocols work per feature column.  Each iteration draws, with a
``numpy.random.PCG64`` generator seeded from the caller's seed:

1. the run length (random-length protocol only), ``rng.integers(lo, hi + 1)``,
   truncated to the remaining budget;
2. one ``(column, start)`` pair uniformly among all positions where that many
   consecutive cells are observed and not yet hidden.

If no such position exists the remaining budget is filled with uniform MCAR
picks among the still-available observed cells.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

SCENARIOS = ("mcar", "fixed_seq", "random_seq")
CLI_SCENARIOS = {"mcar": "mcar", "fixed5": "fixed_seq", "rand3-10": "random_seq"}
SCENARIO_CLI_NAMES = {v: k for k, v in CLI_SCENARIOS.items()}


class MaskContractError(ValueError):
    """An indicating mask selects cells that were never observed."""


class EmptyMaskWarning(UserWarning):
    """The requested rate rounds down to zero hidden cells."""


@dataclass(frozen=True)
class ScenarioSpec:
    kind: str = "mcar"
    rate: float = 0.2
    length: int = 5
    length_range: tuple[int, int] = (3, 10)

    def __post_init__(self):
        if self.kind not in SCENARIOS:
            kind = CLI_SCENARIOS.get(self.kind)
            if kind is None:
                raise ValueError(f"unknown scenario {self.kind!r}")
            object.__setattr__(self, "kind", kind)
        if not 0.0 < self.rate < 1.0:
            raise ValueError(f"rate must lie in (0, 1), got {self.rate}")
        lo, hi = self.length_range
        if self.length < 1 or lo < 1 or hi < lo:
            raise ValueError(f"invalid run lengths: length={self.length}, range={self.length_range}")

    @property
    def cli_name(self) -> str:
        return SCENARIO_CLI_NAMES[self.kind]


@dataclass
class MaskDraw:
    """An indicating mask together with how each hidden cell was chosen."""

    indicating: np.ndarray
    runs: list[tuple[int, int, int]] = field(default_factory=list)  # (column, start, length)
    fallback: list[tuple[int, int]] = field(default_factory=list)  # (row, column)


@dataclass
class MaskedBatch:
    x_hat: np.ndarray  # values with hidden and originally missing cells set to 0
    m_hat: np.ndarray  # model-visible mask
    indicating: np.ndarray
    x_truth: np.ndarray  # original values, 0 where never observed


def target_count(mask: np.ndarray, rate: float) -> int:
    return int(round(rate * int(mask.sum())))


def _as_mask(mask) -> np.ndarray:
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValueError(f"masks are (T, D) arrays, got shape {m.shape}")
    return m.astype(bool)


def _empty_check(observed: np.ndarray, target: int) -> bool:
    if not observed.any():
        raise ValueError("mask has no observed entries")
    if target == 0:
        warnings.warn("masking rate rounds to zero cells; returning an empty mask", EmptyMaskWarning, stacklevel=3)
        return True
    return False


def _mcar_fill(available: np.ndarray, indicating: np.ndarray, count: int, rng, draw: MaskDraw | None = None):
    flat = np.flatnonzero(available)
    if count > flat.size:
        raise ValueError(f"cannot hide {count} cells, only {flat.size} available")
    chosen = rng.choice(flat, size=count, replace=False)
    rows, cols = np.unravel_index(chosen, available.shape)
    indicating[rows, cols] = True
    if draw is not None:
        draw.fallback.extend(zip(rows.tolist(), cols.tolist()))


def generate_mcar(mask, rate: float, seed) -> np.ndarray:
    m = _as_mask(mask)
    rng = np.random.default_rng(seed)
    target = target_count(m, rate)
    indicating = np.zeros_like(m)
    if not _empty_check(m, target):
        _mcar_fill(m, indicating, target, rng)
    return indicating.astype(np.float64)


def _eligible_starts(available: np.ndarray, length: int) -> np.ndarray:
    """``(k, 2)`` array of ``(column, start)`` with ``length`` available cells from ``start``."""
    T = available.shape[0]
    if length > T:
        return np.empty((0, 2), dtype=np.int64)
    csum = np.vstack([np.zeros((1, available.shape[1]), dtype=np.int64), np.cumsum(available, axis=0)])
    window = csum[length:] - csum[:-length]  # (T - length + 1, D)
    starts, cols = np.nonzero(window == length)
    order = np.lexsort((starts, cols))
    return np.stack([cols[order], starts[order]], axis=1)


def draw_sequences(mask, rate: float, seed, lengths: tuple[int, int]) -> MaskDraw:
    """Sequence protocol with run lengths uniform on ``lengths`` (inclusive)."""
    m = _as_mask(mask)
    rng = np.random.default_rng(seed)
    target = target_count(m, rate)
    indicating = np.zeros_like(m)
    draw = MaskDraw(indicating=indicating)
    if _empty_check(m, target):
        draw.indicating = indicating.astype(np.float64)
        return draw
    lo, hi = lengths
    remaining = target
    while remaining > 0:
        length = lo if lo == hi else int(rng.integers(lo, hi + 1))
        length = min(length, remaining)
        if lo == hi and length < lo:
            break  # fixed-length runs never shrink; the remainder is fallback
        available = m & ~indicating
        starts = _eligible_starts(available, length)
        if len(starts) == 0:
            break
        col, start = starts[rng.integers(len(starts))]
        indicating[start:start + length, col] = True
        draw.runs.append((int(col), int(start), int(length)))
        remaining -= length
    if remaining > 0:
        logger.debug("sequence protocol falls back to MCAR for %d cells", remaining)
        _mcar_fill(m & ~indicating, indicating, remaining, rng, draw)
    draw.indicating = indicating.astype(np.float64)
    return draw


def generate_fixed_seq(mask, rate: float, L: int = 5, seed=0) -> np.ndarray:
    return draw_sequences(mask, rate, seed, (L, L)).indicating


def generate_random_seq(mask, rate: float, length_range: tuple[int, int] = (3, 10), seed=0) -> np.ndarray:
    return draw_sequences(mask, rate, seed, tuple(length_range)).indicating


def generate(mask, spec: ScenarioSpec, seed) -> np.ndarray:
    if spec.kind == "mcar":
        return generate_mcar(mask, spec.rate, seed)
    if spec.kind == "fixed_seq":
        return generate_fixed_seq(mask, spec.rate, spec.length, seed)
    return generate_random_seq(mask, spec.rate, spec.length_range, seed)


def generate_windows(masks: np.ndarray, spec: ScenarioSpec, seed) -> np.ndarray:
    """Indicating masks for a stack of ``(n, T, D)`` windows, one child seed per window."""
    children = np.random.SeedSequence(seed).spawn(len(masks))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyMaskWarning)
        out = [generate(m, spec, child) if m.any() else np.zeros(m.shape) for m, child in zip(masks, children)]
    return np.stack(out) if out else np.zeros_like(masks, dtype=np.float64)


def apply_mask(x, mask, indicating) -> MaskedBatch:
    """Hide the ``indicating`` cells of ``x``; works for ``(T, D)`` or ``(n, T, D)``."""
    m = np.asarray(mask, dtype=np.float64)
    ind = np.asarray(indicating, dtype=np.float64)
    if m.shape != ind.shape or np.shape(x) != m.shape:
        raise ValueError(f"shape mismatch: x {np.shape(x)}, M {m.shape}, I {ind.shape}")
    if np.any((ind == 1) & (m == 0)):
        raise MaskContractError("indicating mask selects cells that are not observed")
    x_truth = np.where(m == 1, np.nan_to_num(np.asarray(x, dtype=np.float64)), 0.0)
    m_hat = m - ind
    return MaskedBatch(x_hat=np.where(m_hat == 1, x_truth, 0.0), m_hat=m_hat, indicating=ind, x_truth=x_truth)
