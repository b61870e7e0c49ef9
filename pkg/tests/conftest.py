"""Shared fixtures and independent oracles.

The finite-difference checker and the handwritten cross-entropy oracle
live here so every test compares the library against code that does not
share its implementation path.
"""

from __future__ import annotations

import numpy as np
import pytest

from blocklm.autograd import Tensor, backward
from blocklm.config import ModelConfig, TrainConfig, vanilla_config


def fd_grad(fn, x: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    """Central finite differences of scalar fn at x, element by element."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn()
        flat[i] = orig - eps
        lo = fn()
        flat[i] = orig
        out[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-relative gradient error.

    Central differences of a float32 forward pass carry ~1e-4 absolute
    noise per element at eps=1e-3, so per-element ratios on near-zero
    components measure noise, not correctness; the norm ratio is the
    meaningful relative error.
    """
    num = np.linalg.norm(analytic - numeric)
    den = np.linalg.norm(analytic) + np.linalg.norm(numeric) + 1e-12
    return float(num / den)


def check_op_grads(build, tensors: list[Tensor], eps: float = 1e-3,
                   tol: float = 1e-2):
    """Assert analytic grads of `build()` (a scalar Tensor) match central
    finite differences for every tensor in `tensors`."""
    loss = build()
    backward(loss)
    analytic = [t.grad.copy() for t in tensors]
    for t in tensors:
        t.zero_grad()
    for t, ga in zip(tensors, analytic):
        gn = fd_grad(lambda: build().item(), t.data, eps)
        err = rel_err(ga.astype(np.float64), gn)
        assert err < tol, f"gradient mismatch {err:.3e} for tensor of shape {t.shape}"


def ce_oracle(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray) -> float:
    """Handwritten masked mean cross-entropy (float64 logsumexp)."""
    x = logits.astype(np.float64)
    m = x.max(axis=1, keepdims=True)
    lse = (m + np.log(np.exp(x - m).sum(axis=1, keepdims=True))).ravel()
    nll = lse - x[np.arange(x.shape[0]), targets]
    mask = mask.astype(bool)
    return float(nll[mask].sum() / mask.sum())


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(vocab_size=64, context_length=64, block_length=4,
                       prefix_length=2, model_dim=32, n_layers_block=2,
                       n_layers_token=2, n_heads=2)


@pytest.fixture
def tiny_vanilla_cfg():
    return vanilla_config(vocab_size=64, context_length=64, model_dim=32,
                          n_layers_token=3, n_heads=2)


@pytest.fixture
def tiny_train_cfg():
    return TrainConfig(learning_rate=1e-3, warmup_steps=10, total_steps=100,
                       batch_size=4, seed=0)


def variant_config(embedder: str, decoder: str, **over) -> ModelConfig:
    base = dict(vocab_size=64, context_length=64, block_length=4, prefix_length=2,
                model_dim=32, n_layers_block=2, n_layers_token=2, n_heads=2,
                embedder_variant=embedder, token_decoder_variant=decoder,
                encoder_dim=16, encoder_layers=2, encoder_heads=2, n_cls=3)
    base.update(over)
    return ModelConfig(**base)
