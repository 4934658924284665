"""Central finite-difference gradient checks for the autodiff ops, layers and model."""

from __future__ import annotations

import time
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import layers as L
from .autodiff import Tensor
from .masking import apply_mask
from .model import BratiConfig, BratiParams, brati_forward
from .objective import LossWeights, brati_loss


def numerical_grad(f: Callable[[], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``f()`` with respect to ``x.data`` (perturbed in place)."""
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    with ad.no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            plus = float(f().data)
            flat[i] = orig - h
            minus = float(f().data)
            flat[i] = orig
            gflat[i] = (plus - minus) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``max|a - n| / max(max|a|, max|n|, 1e-6)``.

    The floor keeps identically-zero gradients (e.g. key biases, which softmax
    cancels) from turning finite-difference round-off into a relative error of 1.
    """
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-6)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check(f: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> float:
    """Largest relative error between backprop and finite differences over ``inputs``."""
    for t in inputs:
        t.grad = None
    f().backward()
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, relative_error(analytic, numerical_grad(f, t, h)))
    return worst


def _weighted_sum(rng, shape):
    w = rng.uniform(-1.0, 1.0, shape)
    return lambda out: ad.sum(out * w)


def layer_cases(seed: int = 0) -> dict[str, Callable[[], float]]:
    """Named gradient checks at the small reference configuration."""
    rng = np.random.default_rng(seed)
    T, d, d_ffn, D = 6, 4, 8, 2

    def param_list(group):
        return [t for _, t in group.named_tensors()]

    def case_embedding():
        p = L.EmbeddingParams.init(D, d, rng)
        x = ad.parameter(rng.uniform(-2, 2, (T, D)))
        m = (rng.random((T, D)) > 0.3).astype(float)
        red = _weighted_sum(rng, (T, d))
        return check(lambda: red(L.embed(x, m, p)[1]), [x] + param_list(p))

    def case_attention():
        p = L.MultiHeadAttentionParams.init(d, 2, d, d, rng, bias=True)
        for _, t in p.named_tensors():
            t.data = rng.uniform(-0.5, 0.5, t.shape)
        q = ad.parameter(rng.uniform(-2, 2, (T, d)))
        kv = ad.parameter(rng.uniform(-2, 2, (T, d)))
        red = _weighted_sum(rng, (T, d))
        red_w = _weighted_sum(rng, (T, T))

        def f():
            out, w = L.multi_head_attention(q, kv, kv, p)
            return red(out) + red_w(w)

        return check(f, [q, kv] + param_list(p))

    def case_gru():
        p = L.GruParams.init(d, d, rng, bias=True)
        for _, t in p.named_tensors():
            t.data = rng.uniform(-0.7, 0.7, t.shape)
        x = ad.parameter(rng.uniform(-2, 2, (2, T, d)))
        h0 = ad.parameter(rng.uniform(-1, 1, (d,)))
        red = _weighted_sum(rng, (2, T, d))
        return check(lambda: red(L.gru_forward(x, p, h0)), [x, h0] + param_list(p))

    def case_ffn():
        p = L.FfnParams.init(d, d_ffn, rng)
        for _, t in p.named_tensors():
            t.data = rng.uniform(-1, 1, t.shape)
        x = ad.parameter(rng.uniform(-2, 2, (T, d)))
        red = _weighted_sum(rng, (T, d))
        return check(lambda: red(L.ffn(x, p)), [x] + param_list(p))

    def case_layer_norm():
        gain = ad.parameter(rng.uniform(0.5, 1.5, d))
        bias = ad.parameter(rng.uniform(-1, 1, d))
        x = ad.parameter(rng.uniform(-2, 2, (T, d)))
        red = _weighted_sum(rng, (T, d))
        return check(lambda: red(L.layer_norm(x, gain, bias)), [x, gain, bias])

    def case_model(variant: str):
        def run():
            cfg = BratiConfig(D=D, T=T, d_model=d, d_ffn=d_ffn, heads=1, blocks=1, variant=variant)
            params = BratiParams.init(cfg, seed=seed)
            for t in params:
                if np.all(t.data == 0):
                    t.data = rng.uniform(-0.3, 0.3, t.shape)
            x = rng.uniform(-2, 2, (T, D))
            m = (rng.random((T, D)) > 0.2).astype(float)
            ind = np.zeros((T, D))
            obs = np.argwhere(m == 1)
            for r, c in obs[rng.choice(len(obs), 3, replace=False)]:
                ind[r, c] = 1
            batch = apply_mask(x, m, ind)

            def f():
                out = brati_forward(batch.x_hat, batch.m_hat, params, cfg)
                return brati_loss(out, batch.x_truth, batch.m_hat, batch.indicating, LossWeights()).total

            return check(f, list(params))

        return run

    return {
        "embedding": case_embedding,
        "multi_head_attention": case_attention,
        "gru": case_gru,
        "ffn": case_ffn,
        "layer_norm": case_layer_norm,
        "model_full": case_model("full"),
        "model_single_block": case_model("single_block"),
        "model_average_combine": case_model("average_combine"),
    }


def run_suite(seed: int = 0) -> tuple[dict[str, float], float]:
    start = time.perf_counter()
    errors = {name: fn() for name, fn in layer_cases(seed).items()}
    return errors, time.perf_counter() - start
