"""Joint-optimisation training loop, Adam, the warmup schedule and checkpoints.

Checkpoint layout (little-endian)::

    b"BRATICK1"            8-byte magic
    uint64                 header length in bytes
    header                 UTF-8 JSON: {"config": {...}, "manifest": [{"name", "shape", "dtype": "f64"}, ...]}
    payloads               raw float64 arrays in manifest order, C order
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .layers import ConfigurationError
from .masking import ScenarioSpec, apply_mask, generate_windows
from .model import BratiConfig, BratiParams, brati_forward, impute
from .objective import LossWeights, TrainingDivergenceError, brati_loss

logger = logging.getLogger(__name__)

MAGIC = b"BRATICK1"


class CheckpointError(ValueError):
    """The checkpoint file is truncated or internally inconsistent."""


# ----------------------------------------------------------------------
# schedule and optimiser
# ----------------------------------------------------------------------
def noam_lr(step: int, d_model: int, warmup: int) -> float:
    if step < 1:
        raise ValueError(f"learning-rate schedule is defined for step >= 1, got {step}")
    return d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, ad.Tensor], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update of every parameter that has a gradient."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(f"non-finite gradient for parameter {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_global_norm(params: dict[str, ad.Tensor], max_norm: float) -> float:
    grads = [p.grad for p in params.values() if p.grad is not None]
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


# ----------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------
def save_checkpoint(params: BratiParams, config: BratiConfig, path) -> None:
    named = params.named()
    manifest = [{"name": n, "shape": list(t.shape), "dtype": "f64"} for n, t in named.items()]
    header = json.dumps({"config": config.to_dict(), "manifest": manifest}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for t in named.values():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path, expected: BratiConfig | None = None) -> tuple[BratiParams, BratiConfig]:
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC or len(blob) < 16:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    try:
        header = json.loads(blob[16:16 + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    config = BratiConfig.from_dict(header["config"])
    if expected is not None and expected != config:
        raise ConfigurationError(f"checkpoint config {config} does not match expected {expected}")
    offset = 16 + hlen
    expected_len = offset + sum(8 * int(np.prod(e["shape"], dtype=np.int64)) for e in header["manifest"])
    if expected_len != len(blob):
        raise CheckpointError(f"{path}: payload is {len(blob) - offset} bytes, manifest needs {expected_len - offset}")
    arrays = {}
    for entry in header["manifest"]:
        if entry.get("dtype") != "f64":
            raise CheckpointError(f"{path}: unsupported dtype {entry.get('dtype')!r}")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        arrays[entry["name"]] = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        offset += 8 * count
    params = BratiParams.init(config, seed=0)
    params.load_arrays(arrays)
    return params, config


# ----------------------------------------------------------------------
# training loop
# ----------------------------------------------------------------------
@dataclass
class TrainConfig:
    warmup_steps: int = 4000
    batch_size: int = 32
    max_epochs: int = 1000
    patience: int = 30
    scenario: str = "mcar"
    rate: float = 0.2
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    clip_norm: float | None = None

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        if self.patience < 1 or self.warmup_steps < 1 or self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigurationError("patience, warmup_steps, batch_size and max_epochs must be >= 1")
        ScenarioSpec(self.scenario, self.rate)

    @property
    def scenario_spec(self) -> ScenarioSpec:
        return ScenarioSpec(self.scenario, self.rate)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


class EarlyStopping:
    """Track the best validation score; signal a stop after ``patience`` epochs without strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.best_state: dict[str, np.ndarray] | None = None
        self.stale = 0

    def update(self, epoch: int, value: float, state: Callable[[], dict] | None = None) -> bool:
        if value < self.best:
            self.best, self.best_epoch, self.stale = value, epoch, 0
            if state is not None:
                self.best_state = state()
            return False
        self.stale += 1
        return self.stale >= self.patience


@dataclass
class TrainResult:
    params: BratiParams
    config: BratiConfig
    log: list[dict]
    best_epoch: int
    best_val_mae: float
    stopped_early: bool


def validation_mae(params, cfg, val_batch, batch_size: int = 64) -> float:
    """Masked MAE of the joint representation at the validation indicating cells."""
    ind = val_batch.indicating
    pred = np.empty_like(val_batch.x_hat)
    with ad.no_grad():
        for s in range(0, len(pred), batch_size):
            sl = slice(s, s + batch_size)
            pred[sl] = brati_forward(val_batch.x_hat[sl], val_batch.m_hat[sl], params, cfg).x_joint.data
    return float(np.abs((pred - val_batch.x_truth) * ind).sum() / ind.sum())


def train(cfg: BratiConfig, train_x: np.ndarray, val_batch, tcfg: TrainConfig,
          out_dir=None, params: BratiParams | None = None) -> TrainResult:
    """Fit BRATI on standardised ``(n, T, D)`` training windows (NaN = missing).

    ``val_batch`` is a fixed :class:`~brati.masking.MaskedBatch`. When
    ``out_dir`` is given the best parameters are checkpointed to
    ``out_dir/checkpoint.bin`` whenever validation improves and every epoch
    is appended to ``out_dir/train_log.jsonl``.
    """
    if val_batch.indicating.sum() == 0:
        raise ConfigurationError("validation split has no indicating cells")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train_log.jsonl"
        log_path.write_text("")
    params = params if params is not None else BratiParams.init(cfg, seed=tcfg.seed)
    named = params.named()
    state = AdamState()
    mask = (~np.isnan(train_x)).astype(np.float64)
    filled = np.nan_to_num(train_x)
    spec = tcfg.scenario_spec
    seeds = np.random.SeedSequence(tcfg.seed)
    order_rng, mask_seq, dropout_seq = (np.random.default_rng(s) for s in seeds.spawn(3))
    stopper = EarlyStopping(tcfg.patience)
    log: list[dict] = []
    stopped = False

    for epoch in range(1, tcfg.max_epochs + 1):
        order = order_rng.permutation(len(train_x))
        sums = {"mil": 0.0, "orl": 0.0, "cons": 0.0, "total": 0.0}
        n_batches = 0
        lr = 0.0
        for start in range(0, len(order), tcfg.batch_size):
            idx = order[start:start + tcfg.batch_size]
            ind = generate_windows(mask[idx], spec, int(mask_seq.integers(2**63)))
            batch = apply_mask(filled[idx], mask[idx], ind)
            if batch.indicating.sum() == 0:
                continue
            out = brati_forward(batch.x_hat, batch.m_hat, params, cfg, train=True, rng=dropout_seq)
            losses = brati_loss(out, batch.x_truth, batch.m_hat, batch.indicating, tcfg.loss_weights)
            params.zero_grad()
            losses.total.backward()
            if tcfg.clip_norm is not None:
                clip_global_norm(named, tcfg.clip_norm)
            lr = noam_lr(state.step + 1, cfg.d_model, tcfg.warmup_steps)
            adam_step(named, state, lr)
            for k, v in losses.as_floats().items():
                sums[k] += v
            n_batches += 1

        val = validation_mae(params, cfg, val_batch)
        if not math.isfinite(val):
            raise TrainingDivergenceError(f"validation MAE is {val} at epoch {epoch}")
        row = {"epoch": epoch, **{k: v / max(n_batches, 1) for k, v in sums.items()},
               "val_mae": val, "lr": lr, "step": state.step}
        log.append(row)
        improved = val < stopper.best
        stop = stopper.update(epoch, val, params.arrays)
        if out_dir is not None:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(row) + "\n")
            if improved:
                save_checkpoint(params, cfg, out_dir / "checkpoint.bin")
        logger.info("epoch %d total %.5f val_mae %.5f lr %.3g", epoch, row["total"], val, lr)
        if stop:
            stopped = True
            break

    if stopper.best_state is not None:
        params.load_arrays(stopper.best_state)
    if out_dir is not None:
        save_checkpoint(params, cfg, out_dir / "checkpoint.bin")
    return TrainResult(params, cfg, log, stopper.best_epoch, stopper.best, stopped)


__all__ = [
    "AdamState", "CheckpointError", "EarlyStopping", "TrainConfig", "TrainResult",
    "adam_step", "clip_global_norm", "impute", "load_checkpoint", "noam_lr",
    "save_checkpoint", "train", "validation_mae",
]
