"""Training loop: one step = forward, backward, clipped AdamW update."""

from __future__ import annotations

import logging
import math

import numpy as np

from .autograd import backward
from .config import TrainConfig
from .data import PackedDataset, batch_iter
from .errors import TrainingError
from .model import BlockLM
from .optim import AdamW

log = logging.getLogger("blocklm")


def train_step(model, opt: AdamW, batch, step_idx: int, tokens_seen: int) -> dict:
    loss, stats = model.forward_loss(batch.token_ids, batch.loss_mask)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss {value} at step {step_idx} "
                            f"(loss positions: {stats['count']})")
    backward(loss)
    lr, gnorm = opt.step(step_idx)
    return {
        "step": step_idx,
        "loss": value,
        "grad_norm": gnorm,
        "lr": lr,
        "tokens_seen": tokens_seen + batch.token_ids.size,
    }


def train_loop(model, packed: PackedDataset, tcfg: TrainConfig, *, steps: int | None = None,
               opt: AdamW | None = None, on_step=None) -> list[dict]:
    """Run `steps` (default tcfg.total_steps) steps; returns per-step metrics."""
    steps = tcfg.total_steps if steps is None else steps
    opt = opt or AdamW(model.params(), tcfg)
    history = []
    tokens = 0
    batches = batch_iter(packed, tcfg.batch_size, tcfg.seed)
    for step_idx in range(1, steps + 1):
        batch = next(batches)
        metrics = train_step(model, opt, batch, step_idx, tokens)
        tokens = metrics["tokens_seen"]
        history.append(metrics)
        if on_step is not None:
            on_step(metrics)
        if step_idx % 100 == 0 or step_idx == steps:
            log.info("step %d/%d loss %.4f lr %.2e", step_idx, steps,
                     metrics["loss"], metrics["lr"])
    return history


def position_losses(stats: dict) -> np.ndarray:
    """Within-block mean loss vector from forward_loss stats (block models)."""
    nll, mask = stats["nll"], stats["mask"]
    counts = mask.sum(axis=0)
    sums = (nll * mask).sum(axis=0)
    out = np.zeros(nll.shape[1], dtype=np.float64)
    nz = counts > 0
    out[nz] = sums[nz] / counts[nz]
    return out
