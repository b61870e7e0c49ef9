"""Benchmark and analysis harness.

Throughput scenarios time prefill and decode separately (tokens/sec
counts generated tokens over decode wall time only); cache bytes come
from engine allocation accounting. Analysis covers within-block and
absolute position-wise loss, attention dumps with the first-position
sink statistic, and the nearest-vocabulary probe of context embeddings.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import ops
from .autograd import no_grad
from .data import PackedBatch
from .engine import Sampler, make_engine
from .errors import BenchError, VariantError
from .model import BlockLM, VanillaLM

_PROMPT_TAG = 0x5EED6


@dataclass(frozen=True)
class BenchScenario:
    name: str
    prompt_len: int
    gen_len: int
    batch_size: int
    repetitions: int = 3
    warmup: int = 1

    def __post_init__(self):
        if self.gen_len < 1:
            raise BenchError(f"scenario {self.name!r}: gen_len must be >= 1 "
                             f"(tokens/sec is undefined), got {self.gen_len}")
        if self.prompt_len < 1:
            raise BenchError(f"scenario {self.name!r}: prompt_len must be >= 1")
        if self.repetitions < 3:
            raise BenchError(f"scenario {self.name!r}: repetitions must be >= 3")
        if self.warmup < 1:
            raise BenchError(f"scenario {self.name!r}: warmup must be >= 1")
        if self.batch_size < 1:
            raise BenchError(f"scenario {self.name!r}: batch_size must be >= 1")


def desk_scenarios(batch_size: int = 32) -> list[BenchScenario]:
    """The default prefill-heavy and decode-heavy pair, scaled to desk size."""
    return [
        BenchScenario("prefill_heavy", prompt_len=256, gen_len=64, batch_size=batch_size),
        BenchScenario("decode_heavy", prompt_len=64, gen_len=256, batch_size=batch_size),
    ]


@dataclass
class BenchResult:
    scenario: str
    model_kind: str
    tokens_per_sec: float
    peak_cache_bytes: int
    cache_entries_per_stream: int
    prefill_time: float
    decode_time: float
    tokens: np.ndarray  # (reps, batch, gen_len) for determinism checks


def run_benchmark(model, scenario: BenchScenario, seed: int = 0) -> BenchResult:
    """Median-of-repetitions throughput for one model and scenario."""
    cfg = model.cfg
    need = scenario.prompt_len + scenario.gen_len
    room = cfg.context_length - (cfg.block_length if cfg.kind == "block" else 0)
    if scenario.prompt_len > room or need > cfg.context_length:
        raise BenchError(f"scenario {scenario.name!r} needs {need} tokens but the model "
                         f"context is {cfg.context_length}")
    rng = np.random.default_rng(np.random.SeedSequence((seed, _PROMPT_TAG)))
    prompt = rng.integers(0, 256, size=(scenario.batch_size, scenario.prompt_len),
                          dtype=np.int32)
    if cfg.kind == "block":
        pad = (-scenario.prompt_len) % cfg.block_length
        if pad:
            pads = np.full((scenario.batch_size, pad), cfg.pad_id, np.int32)
            prompt = np.concatenate([pads, prompt], axis=1)
    try:
        engine = make_engine(model, batch_size=scenario.batch_size, seed=seed)
    except MemoryError:
        raise BenchError(f"KV cache allocation failed at batch size "
                         f"{scenario.batch_size}") from None

    sampler = Sampler("greedy")
    prefill_times, decode_times, token_runs = [], [], []
    for rep in range(scenario.warmup + scenario.repetitions):
        engine.reset()
        t0 = time.perf_counter()
        state = engine.prefill(prompt)
        t1 = time.perf_counter()
        toks = np.empty((scenario.batch_size, scenario.gen_len), dtype=np.int64)
        for j in range(scenario.gen_len):
            out = engine.decode_step(state, sampler, stop_on_eos=False)
            if out is None:
                raise BenchError(f"scenario {scenario.name!r}: context exhausted after "
                                 f"{j} generated tokens")
            toks[:, j] = out
        t2 = time.perf_counter()
        if rep >= scenario.warmup:
            prefill_times.append(t1 - t0)
            decode_times.append(t2 - t1)
            token_runs.append(toks)
    decode_time = float(np.median(decode_times))
    return BenchResult(
        scenario=scenario.name,
        model_kind=cfg.kind,
        tokens_per_sec=scenario.batch_size * scenario.gen_len / decode_time,
        peak_cache_bytes=engine.cache_bytes(),
        cache_entries_per_stream=sum(engine.cache_entries_per_stream().values()),
        prefill_time=float(np.median(prefill_times)),
        decode_time=decode_time,
        tokens=np.stack(token_runs),
    )


def evaluate(model, batches) -> dict:
    """Aggregate loss over evaluation batches.

    Block models additionally get the within-block position-loss vector
    (length L_B) and an absolute-position loss trace.
    """
    total, count = 0.0, 0
    pos_sums = pos_counts = None
    abs_sums = abs_counts = None
    with no_grad():
        for batch in batches:
            if not isinstance(batch, PackedBatch):
                raise BenchError("evaluate expects PackedBatch items")
            _, stats = model.forward_loss(batch.token_ids, batch.loss_mask)
            nll, mask = stats["nll"], stats["mask"]
            total += float((nll * mask).sum())
            count += stats["count"]
            if isinstance(model, BlockLM):
                b = batch.token_ids.shape[0]
                lb = model.cfg.block_length
                nper = batch.token_ids.shape[1] // lb - 1
                grid = (nll * mask).reshape(b, nper, lb)
                gmask = mask.reshape(b, nper, lb)
                if pos_sums is None:
                    pos_sums = np.zeros(lb)
                    pos_counts = np.zeros(lb)
                    abs_sums = np.zeros(nper * lb)
                    abs_counts = np.zeros(nper * lb)
                pos_sums += grid.sum(axis=(0, 1))
                pos_counts += gmask.sum(axis=(0, 1))
                abs_sums += grid.reshape(b, -1).sum(axis=0)
                abs_counts += gmask.reshape(b, -1).sum(axis=0)
            else:
                flat = (nll * mask)
                if abs_sums is None:
                    abs_sums = np.zeros(flat.shape[1])
                    abs_counts = np.zeros(flat.shape[1])
                abs_sums += flat.sum(axis=0)
                abs_counts += mask.sum(axis=0)
    if count == 0:
        raise BenchError("no loss positions across the evaluation batches")
    out = {"loss": total / count, "count": count}
    if abs_sums is not None:
        nz = abs_counts > 0
        abs_loss = np.zeros_like(abs_sums)
        abs_loss[nz] = abs_sums[nz] / abs_counts[nz]
        offset = model.cfg.block_length if isinstance(model, BlockLM) else 1
        out["abs_position_loss"] = abs_loss
        out["abs_position_offset"] = offset
    if pos_sums is not None:
        nz = pos_counts > 0
        pos = np.zeros_like(pos_sums)
        pos[nz] = pos_sums[nz] / pos_counts[nz]
        out["position_loss"] = pos
        out["position_counts"] = pos_counts
    return out


def position_wise_loss(model, batches) -> np.ndarray:
    """Mean loss per within-block position over all decodable blocks."""
    if not isinstance(model, BlockLM):
        raise VariantError("position-wise loss is defined for block models only")
    return evaluate(model, batches)["position_loss"]


def dump_attention(model, token_ids: np.ndarray, max_positions: int = 64) -> list[dict]:
    """Row-stochastic attention weights in long format.

    One row per (decoder, layer, head, q, k). Block-decoder matrices are
    truncated to the first `max_positions` query/key positions; the token
    decoder contributes the first decodable block of the first sequence.
    """
    token_ids = np.asarray(token_ids, dtype=np.int32)
    if token_ids.ndim == 1:
        token_ids = token_ids[None, :]
    rows: list[dict] = []
    with no_grad():
        if isinstance(model, VanillaLM):
            record: dict = {}
            model.forward_loss(token_ids, np.ones_like(token_ids, dtype=bool),
                               record=record)
            _emit(rows, "decoder", record, 0, max_positions)
            return rows
        record_blk: dict = {}
        record_tok: dict = {}
        embs = model.embed_blocks(token_ids)
        ctx = model.block_dec.forward(embs, causal=True, record=record_blk)
        n = token_ids.shape[1] // model.cfg.block_length
        m = token_ids.shape[0] * (n - 1)
        ctx_rows = ops.reshape(ops.narrow(ctx, 1, 0, n - 1), (m, model.cfg.model_dim))
        targets = token_ids[:, model.cfg.block_length:].reshape(m, model.cfg.block_length)
        model.token_forward(ctx_rows, targets, record=record_tok)
        _emit(rows, "block_decoder", record_blk, 0, max_positions)
        _emit(rows, "token_decoder", record_tok, 0, None)
    return rows


def _emit(rows: list, decoder: str, record: dict, seq_index: int, max_positions):
    for layer, kinds in sorted(record.items()):
        for kind, probs_list in kinds.items():
            tag = decoder if kind == "self" else f"{decoder}.{kind}"
            probs = probs_list[0][seq_index]  # (H, Tq, Tk)
            h, tq, tk = probs.shape
            q_hi = tq if max_positions is None else min(tq, max_positions)
            k_hi = tk if max_positions is None else min(tk, max_positions)
            for head in range(h):
                for q in range(q_hi):
                    for k in range(k_hi):
                        rows.append({"decoder": tag, "layer": layer, "head": head,
                                     "q": q, "k": k,
                                     "weight": float(probs[head, q, k])})
    return rows


def attention_sink(model, token_ids: np.ndarray) -> list[dict]:
    """Mean attention mass on the first block per block-decoder layer."""
    if not isinstance(model, BlockLM):
        raise VariantError("the sink statistic reads the block decoder")
    token_ids = np.asarray(token_ids, dtype=np.int32)
    if token_ids.ndim == 1:
        token_ids = token_ids[None, :]
    record: dict = {}
    with no_grad():
        embs = model.embed_blocks(token_ids)
        model.block_dec.forward(embs, causal=True, record=record)
    out = []
    for layer, kinds in sorted(record.items()):
        probs = kinds["self"][0]  # (B, H, T, T)
        out.append({"layer": layer, "mass_on_block0": float(probs[..., 0].mean())})
    return out


def nearest_to_vector(model: BlockLM, vec: np.ndarray, k: int) -> list[tuple[int, float]]:
    """Top-k vocabulary rows of the token-decoder table by dot product."""
    scores = model.tok_table.data @ np.asarray(vec, dtype=np.float32)
    k = min(k, scores.shape[0])
    idx = np.argsort(-scores, kind="stable")[:k]
    return [(int(i), float(scores[i])) for i in idx]


def nearest_tokens(model, context_embedding: np.ndarray, k: int) -> list[list[tuple]]:
    """Per prefix slot: the k nearest vocabulary tokens to the projected
    context embedding, ranked by dot product with the token table."""
    if not isinstance(model, BlockLM) or model.cfg.token_decoder_variant != "prefix":
        raise VariantError("nearest-token probing needs the prefix token decoder")
    cfg = model.cfg
    ctx = np.asarray(context_embedding, dtype=np.float32).reshape(1, cfg.model_dim)
    with no_grad():
        st = model.local_start(ctx)
        pref = st["inputs"].data[0]  # (P, D_tok)
    return [nearest_to_vector(model, pref[p], k) for p in range(cfg.prefix_length)]
