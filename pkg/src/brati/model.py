"""The bidirectional recurrent-attention imputation network and its ablations."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import (
    ConfigurationError,
    EmbeddingParams,
    FfnParams,
    GruParams,
    LayerNormParams,
    MultiHeadAttentionParams,
    ParamGroup,
    embed,
    ffn,
    gru_forward,
    layer_norm,
    multi_head_attention,
    positional_encoding,
)

VARIANTS = ("full", "single_block", "average_combine")


@dataclass(frozen=True)
class BratiConfig:
    D: int
    T: int
    d_model: int = 64
    d_ffn: int = 128
    heads: int = 2
    blocks: int = 1
    dropout: float = 0.0
    bias: bool = True
    variant: str = "full"
    d_k: int | None = None
    d_v: int | None = None

    def __post_init__(self):
        if self.D < 1 or self.T < 1:
            raise ConfigurationError(f"D and T must be positive, got D={self.D}, T={self.T}")
        if self.d_model < 2 or self.d_model % 2:
            raise ConfigurationError(f"d_model must be even, got {self.d_model}")
        if self.blocks < 1:
            raise ConfigurationError(f"need at least one imputation block, got {self.blocks}")
        if self.heads < 1 or self.d_ffn < 1:
            raise ConfigurationError("heads and d_ffn must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")

    @property
    def key_dim(self) -> int:
        return self.d_k or self.d_model

    @property
    def value_dim(self) -> int:
        return self.d_v or self.d_model

    @property
    def bidirectional(self) -> bool:
        return self.variant != "single_block"

    @property
    def learned_combination(self) -> bool:
        return self.variant == "full"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BratiConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class BlockParams(ParamGroup):
    mha1: MultiHeadAttentionParams
    norm1: LayerNormParams
    gru: GruParams
    norm2: LayerNormParams
    mha2: MultiHeadAttentionParams
    ffn: FfnParams
    norm3: LayerNormParams

    @classmethod
    def init(cls, cfg: BratiConfig, rng) -> "BlockParams":
        d = cfg.d_model
        return cls(
            mha1=MultiHeadAttentionParams.init(d, cfg.heads, cfg.key_dim, cfg.value_dim, rng, cfg.bias),
            norm1=LayerNormParams.init(d),
            gru=GruParams.init(d, d, rng, cfg.bias),
            norm2=LayerNormParams.init(d),
            mha2=MultiHeadAttentionParams.init(d, cfg.heads, cfg.key_dim, cfg.value_dim, rng, cfg.bias),
            ffn=FfnParams.init(d, cfg.d_ffn, rng),
            norm3=LayerNormParams.init(d),
        )


@dataclass
class DirectionParams(ParamGroup):
    blocks: list[BlockParams]
    W_z: Tensor  # (d_model, D)
    b_z: Tensor  # (D,)

    @classmethod
    def init(cls, cfg: BratiConfig, rng) -> "DirectionParams":
        blocks = [BlockParams.init(cfg, rng) for _ in range(cfg.blocks)]
        bound = np.sqrt(1.0 / cfg.d_model)
        return cls(
            blocks=blocks,
            W_z=ad.parameter(rng.uniform(-bound, bound, (cfg.d_model, cfg.D))),
            b_z=ad.parameter(np.zeros(cfg.D)),
        )


@dataclass
class BratiParams(ParamGroup):
    embedding: EmbeddingParams
    fwd: DirectionParams
    bwd: DirectionParams | None = None
    W_omega: Tensor | None = None  # (2T + D, D)
    b_omega: Tensor | None = None  # (D,)

    @classmethod
    def init(cls, cfg: BratiConfig, seed: int = 0) -> "BratiParams":
        rng = np.random.default_rng(seed)
        params = cls(embedding=EmbeddingParams.init(cfg.D, cfg.d_model, rng), fwd=DirectionParams.init(cfg, rng))
        if cfg.bidirectional:
            params.bwd = DirectionParams.init(cfg, rng)
        if cfg.learned_combination:
            fan_in = 2 * cfg.T + cfg.D
            bound = np.sqrt(1.0 / fan_in)
            params.W_omega = ad.parameter(rng.uniform(-bound, bound, (fan_in, cfg.D)))
            params.b_omega = ad.parameter(np.zeros(cfg.D))
        return params

    def named(self) -> dict[str, Tensor]:
        return dict(self.named_tensors())

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.named().values())

    def zero_grad(self) -> None:
        for t in self:
            t.grad = None

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        """Overwrite parameter values in place; names and shapes must match exactly."""
        named = self.named()
        if set(named) != set(arrays):
            missing = sorted(set(named) - set(arrays))
            extra = sorted(set(arrays) - set(named))
            raise ConfigurationError(f"parameter set mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, t in named.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise ConfigurationError(f"parameter {name}: shape {arr.shape} != expected {t.shape}")
            t.data = arr.copy()

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named().items()}


@dataclass
class BratiOutput:
    x_fwd: Tensor
    x_bwd: Tensor | None
    x_joint: Tensor
    imputed: Tensor
    omega: Tensor | None
    attn_fwd: Tensor | None = field(default=None, repr=False)
    attn_bwd: Tensor | None = field(default=None, repr=False)


# ----------------------------------------------------------------------
def imputation_block(e, p: BlockParams, dropout: float = 0.0, rng=None, train: bool = False):
    """One block: self-attention, GRU, cross-attention, FFN.

    Self-attention, GRU and FFN sit inside residual + post-norm; the
    cross-attention output reaches the FFN through ``gamma + beta``.

    Returns the refined representation and the head-averaged weights of the
    cross-attention, shaped ``(..., T, T)``.
    """
    attn, _ = multi_head_attention(e, e, e, p.mha1, dropout, rng, train)
    alpha = layer_norm(e + attn, p.norm1.gain, p.norm1.bias)
    beta = layer_norm(alpha + gru_forward(alpha, p.gru), p.norm2.gain, p.norm2.bias)
    gamma, gamma_w = multi_head_attention(beta, alpha, alpha, p.mha2, dropout, rng, train)
    delta = layer_norm(beta + ffn(gamma + beta, p.ffn), p.norm3.gain, p.norm3.bias)
    return delta, gamma_w


def run_chain(e, direction: DirectionParams, dropout: float = 0.0, rng=None, train: bool = False):
    """Apply the stacked blocks of one direction and reduce back to ``D`` features."""
    delta, gamma_w = e, None
    for block in direction.blocks:
        delta, gamma_w = imputation_block(delta, block, dropout, rng, train)
    return delta @ direction.W_z + direction.b_z, gamma_w


def combine(e, m_hat, params: BratiParams, cfg: BratiConfig, rng=None, train: bool = False):
    """Everything after the embedding: both chains, alignment and the weighted blend.

    ``e`` is the forward-time embedding; the backward chain consumes its
    reversal and its outputs are flipped back to forward time here.
    """
    m_hat = ad.as_tensor(m_hat)
    x_fwd, gw_fwd = run_chain(e, params.fwd, cfg.dropout, rng, train)
    if not cfg.bidirectional:
        return x_fwd, None, x_fwd, None, gw_fwd, None

    x_bwd_rev, gw_bwd_rev = run_chain(ad.reverse_timeaxis(e), params.bwd, cfg.dropout, rng, train)
    x_bwd = ad.reverse_timeaxis(x_bwd_rev)
    gw_bwd = ad.reverse(ad.reverse(gw_bwd_rev, -2), -1)

    if cfg.learned_combination:
        features = ad.concat_lastaxis([m_hat, gw_fwd, gw_bwd])
        omega = ad.sigmoid(features @ params.W_omega + params.b_omega)
    else:
        omega = Tensor(np.full(x_fwd.shape[-2:], 0.5))
    x_joint = x_fwd * omega + x_bwd * (1.0 - omega)
    return x_fwd, x_bwd, x_joint, omega, gw_fwd, gw_bwd


def _check_params(params: BratiParams, cfg: BratiConfig) -> None:
    if (params.bwd is not None) != cfg.bidirectional:
        raise ConfigurationError(f"parameters do not match variant {cfg.variant!r} (backward chain)")
    if (params.W_omega is not None) != cfg.learned_combination:
        raise ConfigurationError(f"parameters do not match variant {cfg.variant!r} (combination weights)")
    if params.embedding.W_emb.shape != (2 * cfg.D, cfg.d_model):
        raise ConfigurationError(f"embedding shape {params.embedding.W_emb.shape} does not match config")
    if len(params.fwd.blocks) != cfg.blocks:
        raise ConfigurationError(f"expected {cfg.blocks} blocks, found {len(params.fwd.blocks)}")
    if cfg.learned_combination and params.W_omega.shape != (2 * cfg.T + cfg.D, cfg.D):
        raise ConfigurationError(f"W_omega shape {params.W_omega.shape} does not match T={cfg.T}, D={cfg.D}")


def brati_forward(x_hat, m_hat, params: BratiParams, cfg: BratiConfig,
                  train: bool = False, rng: np.random.Generator | None = None) -> BratiOutput:
    """Impute ``x_hat`` (zero at missing cells) given its missing mask ``m_hat``.

    Both inputs are ``(T, D)`` or ``(B, T, D)``.  Observed cells of the final
    imputation are copied from ``x_hat``.
    """
    _check_params(params, cfg)
    x_hat, m_hat = ad.as_tensor(x_hat), ad.as_tensor(m_hat)
    if x_hat.shape[-2:] != (cfg.T, cfg.D):
        raise ConfigurationError(f"input window {x_hat.shape[-2:]} does not match config T={cfg.T}, D={cfg.D}")
    e, _ = embed(x_hat, m_hat, params.embedding, positional_encoding(cfg.T, cfg.d_model))
    x_fwd, x_bwd, x_joint, omega, gw_f, gw_b = combine(e, m_hat, params, cfg, rng, train)
    imputed = x_hat * m_hat + x_joint * (1.0 - m_hat)
    return BratiOutput(x_fwd, x_bwd, x_joint, imputed, omega, gw_f, gw_b)


def parameter_count(cfg: BratiConfig) -> int:
    """Number of scalar learnables for ``cfg`` (counted from the instantiated shapes)."""
    params = BratiParams.init(cfg, seed=0)
    return int(np.sum([t.size for t in params]))


def impute(x_hat: np.ndarray, m_hat: np.ndarray, params: BratiParams, cfg: BratiConfig,
           batch_size: int = 64) -> np.ndarray:
    """Inference helper over an ``(n, T, D)`` array; returns the final imputation."""
    out = np.empty_like(x_hat, dtype=np.float64)
    with ad.no_grad():
        for start in range(0, len(x_hat), batch_size):
            sl = slice(start, start + batch_size)
            out[sl] = brati_forward(x_hat[sl], m_hat[sl], params, cfg).imputed.data
    return out
