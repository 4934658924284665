"""Masked metrics, naive baselines, container evaluation and the ablation runner."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable

import jsonschema
import numpy as np

from .data import DatasetContainer
from .layers import ConfigurationError
from .masking import MaskedBatch, ScenarioSpec, apply_mask, generate_windows
from .model import BratiConfig, BratiParams, impute as model_impute, parameter_count
from .trainer import train

Imputer = Callable[[MaskedBatch], np.ndarray]


class UndefinedMetricError(ValueError):
    pass


def _check(imputation, target, mask):
    imputation = np.asarray(imputation, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if not imputation.shape == target.shape == mask.shape:
        raise ValueError(f"shape mismatch: {imputation.shape}, {target.shape}, {mask.shape}")
    if mask.sum() == 0:
        raise UndefinedMetricError("metric over an empty indicating mask")
    # cells outside the mask never contribute, even if they are NaN
    diff = np.where(mask != 0, imputation - target, 0.0) * mask
    return diff, np.where(mask != 0, target, 0.0) * mask, mask


def metric_mae(imputation, target, mask) -> float:
    diff, _, mask = _check(imputation, target, mask)
    return float(np.abs(diff).sum() / mask.sum())


def metric_rmse(imputation, target, mask) -> float:
    diff, _, mask = _check(imputation, target, mask)
    return float(math.sqrt((diff ** 2).sum() / mask.sum()))


def metric_mre(imputation, target, mask) -> float:
    diff, tgt, _ = _check(imputation, target, mask)
    denom = np.abs(tgt).sum()
    if denom == 0:
        raise UndefinedMetricError("relative error with an all-zero target on the mask")
    return float(np.abs(diff).sum() / denom)


# ----------------------------------------------------------------------
# baselines (standardised space)
# ----------------------------------------------------------------------
def feature_medians(train_values: np.ndarray) -> np.ndarray:
    flat = train_values.reshape(-1, train_values.shape[-1])
    observed = ~np.isnan(flat)
    if np.any(observed.sum(axis=0) == 0):
        raise ConfigurationError("a feature has no observed training values; median undefined")
    return np.array([np.median(flat[observed[:, d], d]) for d in range(flat.shape[1])])


def median_impute(train_values: np.ndarray, batch: MaskedBatch) -> np.ndarray:
    """Fill every hidden cell with its feature's training median."""
    med = feature_medians(train_values)
    return np.where(batch.m_hat == 1, batch.x_hat, med)


def locf_impute(batch: MaskedBatch) -> np.ndarray:
    """Carry the last visible value forward along time; leading gaps become 0."""
    m = batch.m_hat == 1
    visible = np.where(m, batch.x_hat, 0.0)
    idx = np.where(m, np.arange(m.shape[-2])[:, None], -1)
    last = np.maximum.accumulate(idx, axis=-2)
    filled = np.take_along_axis(visible, np.maximum(last, 0), axis=-2)
    return np.where(last >= 0, filled, 0.0)


# ----------------------------------------------------------------------
# reports
# ----------------------------------------------------------------------
REPORT_SCHEMA = {
    "type": "object",
    "required": ["dataset", "scenario", "rate", "model", "mae", "rmse", "mre", "n_evaluated", "seed", "standardized"],
    "properties": {
        "dataset": {"type": "string"},
        "scenario": {"type": ["string", "null"]},
        "rate": {"type": ["number", "null"]},
        "model": {"type": "string"},
        "mae": {"type": "number", "minimum": 0},
        "rmse": {"type": "number", "minimum": 0},
        "mre": {"type": "number", "minimum": 0},
        "n_evaluated": {"type": "integer", "minimum": 1},
        "seed": {"type": ["integer", "null"]},
        "standardized": {"type": "boolean"},
        "mask_sha256": {"type": "string"},
    },
}


@dataclass
class MetricsReport:
    dataset: str
    scenario: str | None
    rate: float | None
    model: str
    mae: float
    rmse: float
    mre: float
    n_evaluated: int
    seed: int | None
    standardized: bool
    mask_sha256: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        validate_report(d)
        return cls(**d)

    def write(self, path) -> None:
        Path(path).write_text(self.to_json())


def validate_report(d: dict) -> None:
    jsonschema.validate(d, REPORT_SCHEMA)


def mask_digest(indicating: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(indicating, dtype=np.uint8).tobytes()).hexdigest()


def container_batch(container: DatasetContainer) -> MaskedBatch:
    """Standardised masked view of a container that carries an indicating mask."""
    if container.indicating is None:
        raise ConfigurationError("container has no indicating mask (run `mask` first)")
    return apply_mask(container.standardized(), container.mask, container.indicating)


def evaluate(imputer: Imputer, container: DatasetContainer, model_name: str,
             standardized: bool = True) -> MetricsReport:
    """Pool metrics over the indicating cells of every window in ``container``."""
    batch = container_batch(container)
    imputation = imputer(batch)
    truth = batch.x_truth
    if not standardized:
        std = container.standardizer
        imputation, truth = std.inverse(imputation), std.inverse(truth)
    ind = batch.indicating
    meta = container.meta
    return MetricsReport(
        dataset=str(meta.get("dataset") or meta.get("source") or "dataset"),
        scenario=meta.get("scenario"),
        rate=meta.get("rate"),
        model=model_name,
        mae=metric_mae(imputation, truth, ind),
        rmse=metric_rmse(imputation, truth, ind),
        mre=metric_mre(imputation, truth, ind),
        n_evaluated=int(ind.sum()),
        seed=meta.get("seed"),
        standardized=standardized,
        mask_sha256=mask_digest(ind),
    )


def model_imputer(params: BratiParams, cfg: BratiConfig) -> Imputer:
    return lambda batch: model_impute(batch.x_hat, batch.m_hat, params, cfg)


def median_imputer(train: DatasetContainer) -> Imputer:
    train_std = train.standardized()
    return lambda batch: median_impute(train_std, batch)


def locf_imputer() -> Imputer:
    return locf_impute


def mask_container(container: DatasetContainer, spec: ScenarioSpec, seed: int) -> DatasetContainer:
    ind = generate_windows(container.mask, spec, seed)
    return container.with_indicating(ind, scenario=spec.cli_name, rate=spec.rate, seed=seed)


# ----------------------------------------------------------------------
# ablation
# ----------------------------------------------------------------------
@dataclass
class AblationResult:
    scenario: str
    reports: dict[str, MetricsReport]
    parameter_counts: dict[str, int]


def run_ablation(model_cfg: dict, tcfg, splits: dict[str, DatasetContainer], scenarios,
                 rate: float, seed: int, out_dir=None, variants=("full", "single_block", "average_combine"),
                 baselines: bool = True) -> list[AblationResult]:
    """Train and evaluate each variant per scenario on identical masks and seeds."""
    train_c, val_c, test_c = splits["train"], splits["val"], splits["test"]
    results = []
    for k, scenario in enumerate(scenarios):
        spec = ScenarioSpec(scenario, rate)
        val_m = mask_container(val_c, spec, seed + 1000 * k + 1)
        test_m = mask_container(test_c, spec, seed + 1000 * k + 2)
        val_batch = container_batch(val_m)
        reports, counts = {}, {}
        for variant in variants:
            cfg = BratiConfig(D=train_c.D, T=train_c.T, **{**model_cfg, "variant": variant})
            run_tcfg = replace(tcfg, scenario=spec.kind, rate=rate)
            run_dir = None if out_dir is None else Path(out_dir) / spec.cli_name / variant
            result = train(cfg, train_c.standardized(), val_batch, run_tcfg, out_dir=run_dir)
            reports[variant] = evaluate(model_imputer(result.params, cfg), test_m, f"brati-{variant}")
            counts[variant] = parameter_count(cfg)
        if baselines:
            reports["median"] = evaluate(median_imputer(train_c), test_m, "median")
            reports["locf"] = evaluate(locf_imputer(), test_m, "locf")
        results.append(AblationResult(spec.cli_name, reports, counts))
    return results
