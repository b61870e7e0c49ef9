"""Analytical inference cost model: FLOPs, parameter bytes, KV cache bytes
and KV cache IO per scenario, with the structural reduction factors.

Conventions (documented once, used everywhere):
- linear compute: 2 x non-embedding-params x processed positions;
- attention compute: 2*T^2*D per layer causal (half the executed width),
  4*T^2*D bidirectional; incremental decode sums 4*t*D per step, which
  aggregates to the same causal total;
- KV cache bytes are allocation-sized (what an engine must reserve):
  vanilla 2*layers*D*L, block 2*(layers_blk*D*L/L_B + layers_tok*D_tok*S)
  with S the local sequence length per variant;
- KV IO counts bytes read at each step (cache length after the step's
  append) plus bytes written, so decode IO is quadratic in length.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .config import ModelConfig, param_count, validate_model
from .errors import ConfigError

SCENARIOS = ("train", "prefill", "decode")

R_FACTOR_NOTE = ("token_kv_size_vs_vanilla uses R = L / L_B; for L=2048, L_B=4 the "
                 "formula gives 512, although a figure of 256 is sometimes quoted "
                 "for this shape. This report always uses the formula.")


def _layer_linear_params(dim: int) -> int:
    return 12 * dim * dim + 13 * dim + 4 * dim


def _stack_params(n_layers: int, dim: int) -> int:
    return n_layers * _layer_linear_params(dim) + 2 * dim


def _attn_flops(t: int, dim: int, n_layers: int, causal: bool) -> float:
    return (2.0 if causal else 4.0) * t * t * dim * n_layers


def _decode_attn_flops(start_len: int, steps: int, dim: int, n_layers: int) -> float:
    """Sum of 4*t*D per layer for cache lengths start_len+1 .. start_len+steps."""
    t0, t1 = start_len + 1, start_len + steps
    return 4.0 * dim * n_layers * (t1 * (t1 + 1) - t0 * (t0 - 1)) / 2.0


def local_cache_entries(cfg: ModelConfig) -> int:
    """Token-decoder cache slots per stream (self + cross memory)."""
    if cfg.kind == "vanilla":
        return 0
    s = cfg.local_len()
    if cfg.token_decoder_variant == "cross_attention":
        s += cfg.block_length
    return s


def cache_entries(cfg: ModelConfig, L: int) -> dict:
    """Per-stream KV slot counts, matching engine allocations exactly."""
    if cfg.kind == "vanilla":
        return {"decoder": L}
    return {"block": L // cfg.block_length, "local": local_cache_entries(cfg)}


@dataclass
class CostReport:
    scenario: str
    flops_total: float
    flops_by_component: dict
    param_bytes: int
    kv_bytes_peak: int
    kv_io_bytes_total: float
    reduction_factors: dict
    notes: list = field(default_factory=list)


def flops(cfg: ModelConfig, L: int, batch: int, scenario: str,
          gen_len: int = 0) -> dict:
    """FLOPs per component for one scenario.

    `L` is the row length (train), the prompt length (prefill/decode);
    `gen_len` is used by decode. Training counts only decodable blocks for
    the token decoder (the first block of a row has no context).
    """
    problems = validate_model(cfg)
    if problems:
        raise ConfigError(problems)
    if scenario not in SCENARIOS:
        raise ConfigError(f"scenario must be one of {SCENARIOS}, got {scenario!r}")
    d, dt, lb = cfg.model_dim, cfg.d_tok, cfg.block_length
    out: dict = {}
    if cfg.kind == "vanilla":
        n_lin = _stack_params(cfg.n_layers_token, d)
        if scenario == "train":
            out["decoder"] = (2.0 * n_lin * L
                              + _attn_flops(L, d, cfg.n_layers_token, True)) * batch
        elif scenario == "prefill":
            out["decoder"] = (2.0 * n_lin * L
                              + _attn_flops(L, d, cfg.n_layers_token, True)) * batch
        else:
            out["decoder"] = (2.0 * n_lin * gen_len
                              + _decode_attn_flops(L, gen_len, d,
                                                   cfg.n_layers_token)) * batch
        out["total"] = out["decoder"]
        return out

    n_blocks = L // lb
    s_local = cfg.local_len()
    n_blk = _stack_params(cfg.n_layers_block, d)
    n_tok = _stack_params(cfg.n_layers_token, dt)
    if cfg.token_decoder_variant == "cross_attention":
        n_tok += cfg.n_layers_token * (4 * dt * dt + 4 * dt + 2 * dt)

    # embedder
    emb = 0.0
    if cfg.embedder_variant == "lookup":
        if cfg.d_emb * lb != d:
            emb = 2.0 * lb * cfg.d_emb * d * n_blocks
    else:
        de = cfg.encoder_dim
        span = lb + (cfg.n_cls if cfg.embedder_variant == "cls" else 0)
        n_enc = _stack_params(cfg.encoder_layers, de)
        per_block = 2.0 * n_enc * span + _attn_flops(span, de, cfg.encoder_layers, False)
        width = lb if cfg.embedder_variant == "encoder" else cfg.n_cls
        per_block += 2.0 * width * de * d
        emb = per_block * n_blocks

    if scenario == "train":
        blk = 2.0 * n_blk * n_blocks + _attn_flops(n_blocks, d, cfg.n_layers_block, True)
        dec_blocks = n_blocks - 1
        tok = dec_blocks * (2.0 * n_tok * s_local
                            + _attn_flops(s_local, dt, cfg.n_layers_token, True))
        out = {"embedder": emb * batch, "block_decoder": blk * batch,
               "token_decoder": tok * batch}
    elif scenario == "prefill":
        blk = 2.0 * n_blk * n_blocks + _attn_flops(n_blocks, d, cfg.n_layers_block, True)
        out = {"embedder": emb * batch, "block_decoder": blk * batch,
               "token_decoder": 0.0}
    else:
        gen_blocks = max(gen_len - 1, 0) // lb
        emb_dec = emb / max(n_blocks, 1) * gen_blocks
        blk = (2.0 * n_blk * gen_blocks
               + _decode_attn_flops(n_blocks, gen_blocks, d, cfg.n_layers_block))
        per_block_tok = (2.0 * n_tok * s_local
                         + _attn_flops(s_local, dt, cfg.n_layers_token, True))
        tok = per_block_tok * (gen_blocks + 1) if gen_len else 0.0
        out = {"embedder": emb_dec * batch, "block_decoder": blk * batch,
               "token_decoder": tok * batch}
    out["total"] = sum(out.values())
    return out


def kv_cache_footprint(cfg: ModelConfig, L: int, batch: int,
                       bytes_per_elem: int = 2) -> int:
    """Allocation-sized KV cache bytes for one engine at context L."""
    problems = validate_model(cfg)
    if problems:
        raise ConfigError(problems)
    if cfg.kind == "vanilla":
        return 2 * cfg.n_layers_token * cfg.model_dim * L * batch * bytes_per_elem
    block = 2 * cfg.n_layers_block * cfg.model_dim * (L // cfg.block_length)
    local = 2 * cfg.n_layers_token * cfg.d_tok * local_cache_entries(cfg)
    return (block + local) * batch * bytes_per_elem


def kv_io_total(cfg: ModelConfig, prompt_len: int, gen_len: int, batch: int,
                bytes_per_elem: int = 2) -> float:
    """Bytes moved through KV caches across a full decode.

    Reads re-fetch the cache at its post-append length every step; writes
    add one entry per step (plus the prefill fill)."""
    if prompt_len < 0 or gen_len < 0:
        raise ConfigError(f"lengths must be >= 0, got prompt {prompt_len}, gen {gen_len}")
    if gen_len == 0:
        return 0.0
    per_entry_v = 2 * cfg.model_dim * bytes_per_elem

    def ramp(start: int, steps: int) -> float:
        # sum of cache lengths start+1 .. start+steps
        return steps * start + steps * (steps + 1) / 2.0

    if cfg.kind == "vanilla":
        per = per_entry_v * cfg.n_layers_token
        reads = ramp(prompt_len, gen_len) * per
        writes = (prompt_len + gen_len) * per
        return float((reads + writes) * batch)

    lb = cfg.block_length
    n_prompt_blocks = prompt_len // lb
    gen_blocks = max(gen_len - 1, 0) // lb
    per_blk = per_entry_v * cfg.n_layers_block
    blk_reads = ramp(n_prompt_blocks, gen_blocks) * per_blk
    blk_writes = (n_prompt_blocks + gen_blocks) * per_blk

    per_tok = 2 * cfg.d_tok * bytes_per_elem * cfg.n_layers_token
    s0 = cfg.local_len() - lb  # prefix slots forwarded at block start
    blocks_touched = gen_blocks + 1
    per_block_reads = ramp(0, s0) + ramp(s0, lb - 1)
    tok_reads = per_block_reads * blocks_touched * per_tok
    tok_writes = (s0 + lb - 1) * blocks_touched * per_tok
    if cfg.token_decoder_variant == "cross_attention":
        cross = lb * (s0 + lb) * blocks_touched * per_tok  # memory re-read each step
        tok_reads += cross
    return float((blk_reads + blk_writes + tok_reads + tok_writes) * batch)


def reduction_factors(cfg: ModelConfig) -> dict:
    if cfg.kind == "vanilla":
        return {}
    lb = cfg.block_length
    return {
        "block_kv_size": float(lb),
        "block_kv_io": float(lb * lb),
        "token_kv_size_vs_vanilla": cfg.context_length / lb,
    }


def cost_report(cfg: ModelConfig, scenario: str, prompt_len: int, gen_len: int,
                batch: int, bytes_per_elem: int = 2) -> CostReport:
    L = cfg.context_length if scenario == "train" else prompt_len
    comp = flops(cfg, L, batch, scenario, gen_len=gen_len)
    total, _ = param_count(cfg)
    notes = [] if cfg.kind == "vanilla" else [R_FACTOR_NOTE]
    return CostReport(
        scenario=scenario,
        flops_total=comp["total"],
        flops_by_component={k: v for k, v in comp.items() if k != "total"},
        param_bytes=total * bytes_per_elem,
        kv_bytes_peak=kv_cache_footprint(cfg, cfg.context_length, batch, bytes_per_elem),
        kv_io_bytes_total=kv_io_total(cfg, prompt_len, gen_len, batch, bytes_per_elem),
        reduction_factors=reduction_factors(cfg),
        notes=notes,
    )


def isoflop_steps(ref_cfg: ModelConfig, ref_steps: int, cand_cfg: ModelConfig,
                  L: int, batch: int) -> int:
    """Steps for the candidate so its training FLOPs match the reference's."""
    ref = flops(ref_cfg, L, batch, "train")["total"]
    cand = flops(cand_cfg, L, batch, "train")["total"]
    if cand <= 0:
        raise ConfigError("candidate config has zero training FLOPs per step")
    return max(1, round(ref_steps * ref / cand))


def report_rows(name: str, report: CostReport) -> list[dict]:
    """Flatten a report into one CSV row."""
    row = {
        "config": name,
        "scenario": report.scenario,
        "flops_total": f"{report.flops_total:.6g}",
        "param_bytes": report.param_bytes,
        "kv_bytes_peak": report.kv_bytes_peak,
        "kv_io_bytes_total": f"{report.kv_io_bytes_total:.6g}",
    }
    for k, v in sorted(report.flops_by_component.items()):
        row[f"flops_{k}"] = f"{v:.6g}"
    for k, v in sorted(report.reduction_factors.items()):
        row[f"reduction_{k}"] = v
    row["notes"] = " | ".join(report.notes)
    return [row]
