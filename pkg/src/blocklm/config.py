"""Model and training hyperparameters: validation, persistence, counting.

Desk-scale defaults keep the reference shapes (block length 4, prefix 2,
equal block/token decoder allocation) at laptop cost. Special token ids
are derived from the vocabulary size: BOS = V-3, EOS = V-2, PAD = V-1.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

EMBEDDER_VARIANTS = ("lookup", "encoder", "cls")
TOKEN_DECODER_VARIANTS = ("prefix", "summation", "cross_attention")
LR_SCHEDULES = ("cosine", "constant")


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "block"  # "vanilla" | "block"
    vocab_size: int = 259
    context_length: int = 256
    block_length: int = 4
    prefix_length: int = 2
    model_dim: int = 128
    token_dim: int = 0  # 0 -> model_dim
    n_layers_block: int = 4
    n_layers_token: int = 4
    n_heads: int = 4
    embedder_variant: str = "lookup"
    token_decoder_variant: str = "prefix"
    emb_dim: int = 0  # lookup table width; 0 -> model_dim // block_length
    encoder_dim: int = 256
    encoder_layers: int = 3
    encoder_heads: int = 4
    n_cls: int = 3

    @property
    def d_tok(self) -> int:
        return self.token_dim or self.model_dim

    @property
    def d_emb(self) -> int:
        return self.emb_dim or self.model_dim // self.block_length

    @property
    def n_blocks(self) -> int:
        return self.context_length // self.block_length

    @property
    def bos_id(self) -> int:
        return self.vocab_size - 3

    @property
    def eos_id(self) -> int:
        return self.vocab_size - 2

    @property
    def pad_id(self) -> int:
        return self.vocab_size - 1

    def local_len(self) -> int:
        """Token-decoder sequence length per block."""
        if self.token_decoder_variant == "prefix":
            return self.prefix_length + self.block_length
        return self.block_length


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    warmup_steps: int = 100
    total_steps: int = 2000
    batch_size: int = 8
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    lr_schedule: str = "cosine"


def vanilla_config(**over) -> ModelConfig:
    base = dict(kind="vanilla", block_length=1, prefix_length=0, n_layers_block=0,
                n_layers_token=8, emb_dim=0)
    base.update(over)
    return ModelConfig(**base)


def block_config(**over) -> ModelConfig:
    return ModelConfig(**over)


def validate_model(cfg: ModelConfig) -> list[str]:
    """Return every violated constraint (empty list when valid)."""
    p: list[str] = []
    if cfg.kind not in ("vanilla", "block"):
        p.append(f"kind must be vanilla|block, got {cfg.kind!r}")
        return p
    if cfg.vocab_size < 4:
        p.append(f"vocab_size must be >= 4 (three specials + payload), got {cfg.vocab_size}")
    if cfg.block_length < 1:
        p.append(f"block_length must be ≥ 1, got {cfg.block_length}")
    if cfg.context_length < 1:
        p.append(f"context_length must be >= 1, got {cfg.context_length}")
    if cfg.block_length >= 1 and cfg.context_length % cfg.block_length != 0:
        p.append(f"context_length {cfg.context_length} is not divisible by "
                 f"block_length {cfg.block_length}")
    if cfg.model_dim < 1:
        p.append(f"model_dim must be >= 1, got {cfg.model_dim}")
    if cfg.n_heads < 1 or cfg.model_dim % max(cfg.n_heads, 1) != 0:
        p.append(f"model_dim {cfg.model_dim} is not divisible by n_heads {cfg.n_heads}")
    if cfg.d_tok % max(cfg.n_heads, 1) != 0:
        p.append(f"token_dim {cfg.d_tok} is not divisible by n_heads {cfg.n_heads}")
    if cfg.embedder_variant not in EMBEDDER_VARIANTS:
        p.append(f"embedder_variant must be one of {EMBEDDER_VARIANTS}, "
                 f"got {cfg.embedder_variant!r}")
    if cfg.token_decoder_variant not in TOKEN_DECODER_VARIANTS:
        p.append(f"token_decoder_variant must be one of {TOKEN_DECODER_VARIANTS}, "
                 f"got {cfg.token_decoder_variant!r}")
    if cfg.kind == "vanilla":
        if cfg.block_length != 1:
            p.append(f"vanilla kind forces block_length = 1, got {cfg.block_length}")
        if cfg.prefix_length != 0:
            p.append(f"vanilla kind forces prefix_length = 0, got {cfg.prefix_length}")
        if cfg.n_layers_block != 0:
            p.append(f"vanilla kind forces n_layers_block = 0, got {cfg.n_layers_block}")
    else:
        if cfg.token_decoder_variant == "prefix" and cfg.prefix_length < 1:
            p.append(f"prefix variant needs prefix_length ≥ 1, got {cfg.prefix_length}")
        if (cfg.embedder_variant == "lookup" and cfg.emb_dim == 0
                and cfg.block_length >= 1 and cfg.model_dim % cfg.block_length != 0):
            p.append(f"lookup embedder needs model_dim divisible by block_length: "
                     f"{cfg.model_dim} % {cfg.block_length} != 0")
        if cfg.embedder_variant in ("encoder", "cls"):
            if cfg.encoder_layers < 1:
                p.append(f"encoder_layers must be >= 1, got {cfg.encoder_layers}")
            if cfg.encoder_dim < 1 or cfg.encoder_dim % max(cfg.encoder_heads, 1) != 0:
                p.append(f"encoder_dim {cfg.encoder_dim} is not divisible by "
                         f"encoder_heads {cfg.encoder_heads}")
        if cfg.embedder_variant == "cls" and cfg.n_cls < 1:
            p.append(f"cls embedder needs n_cls >= 1, got {cfg.n_cls}")
    if cfg.n_layers_block < 0 or cfg.n_layers_token < 0:
        p.append("layer counts must be >= 0")
    if cfg.kind == "block" and cfg.n_layers_token < 1:
        p.append(f"block kind needs n_layers_token >= 1, got {cfg.n_layers_token}")
    return p


def validate_train(tcfg: TrainConfig) -> list[str]:
    p: list[str] = []
    if tcfg.warmup_steps < 0:
        p.append(f"warmup_steps must be >= 0, got {tcfg.warmup_steps}")
    if tcfg.total_steps <= tcfg.warmup_steps:
        p.append(f"total_steps {tcfg.total_steps} must exceed warmup_steps {tcfg.warmup_steps}")
    if tcfg.batch_size < 1:
        p.append(f"batch_size must be >= 1, got {tcfg.batch_size}")
    if tcfg.learning_rate <= 0:
        p.append(f"learning_rate must be > 0, got {tcfg.learning_rate}")
    if tcfg.lr_schedule not in LR_SCHEDULES:
        p.append(f"lr_schedule must be one of {LR_SCHEDULES}, got {tcfg.lr_schedule!r}")
    return p


def _from_dict(cls, section: dict, where: str):
    known = {f.name for f in dataclasses.fields(cls)}
    bad = [k for k in section if k not in known]
    if bad:
        raise ConfigError([f"unknown field {k!r} in {where} config" for k in bad])
    return cls(**section)


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply `section.key=value` strings onto the raw config dict."""
    for ov in overrides or ():
        if "=" not in ov:
            raise ConfigError(f"override {ov!r} is not of the form section.key=value")
        key, _, val = ov.partition("=")
        if "." not in key:
            raise ConfigError(f"override key {key!r} must be model.<field> or train.<field>")
        section, _, name = key.partition(".")
        if section not in ("model", "train"):
            raise ConfigError(f"override section must be model|train, got {section!r}")
        try:
            parsed = json.loads(val)
        except json.JSONDecodeError:
            parsed = val
        raw.setdefault(section, {})[name] = parsed
    return raw


def load_config(path, overrides=()) -> tuple[ModelConfig, TrainConfig]:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    raw = apply_overrides(raw, overrides)
    mcfg = _from_dict(ModelConfig, raw.get("model", {}), "model")
    tcfg = _from_dict(TrainConfig, raw.get("train", {}), "train")
    problems = validate_model(mcfg) + validate_train(tcfg)
    if problems:
        raise ConfigError(problems)
    return mcfg, tcfg


def save_config(path, mcfg: ModelConfig, tcfg: TrainConfig) -> None:
    raw = {"model": dataclasses.asdict(mcfg), "train": dataclasses.asdict(tcfg)}
    Path(path).write_text(json.dumps(raw, indent=2) + "\n")


def _layer_params(dim: int) -> int:
    # qkv + out projections, 4x feedforward, biases, two pre-norm affine pairs
    return 12 * dim * dim + 13 * dim + 4 * dim


def _cross_params(dim: int) -> int:
    return 4 * dim * dim + 4 * dim + 2 * dim


def param_count(cfg: ModelConfig) -> tuple[int, int]:
    """(total, non_embedding) parameter counts.

    Non-embedding covers decoder layers, encoder layers, final norms, and
    every projection (embedder, context-injection); embedding tables and
    the classifier count only toward the total.
    """
    problems = validate_model(cfg)
    if problems:
        raise ConfigError(problems)
    d = cfg.model_dim
    dt = cfg.d_tok
    v = cfg.vocab_size
    non_emb = 0
    emb = 0
    if cfg.kind == "vanilla":
        non_emb += cfg.n_layers_token * _layer_params(d) + 2 * d
        emb += v * d  # input table
        emb += d * v + v  # classifier
        return non_emb + emb, non_emb

    # block decoder + its final norm
    non_emb += cfg.n_layers_block * _layer_params(d) + 2 * d
    # token decoder (+cross-attention weights when used) + final norm
    non_emb += cfg.n_layers_token * _layer_params(dt) + 2 * dt
    if cfg.token_decoder_variant == "cross_attention":
        non_emb += cfg.n_layers_token * _cross_params(dt)
        non_emb += dt  # local start embedding
    # context injection projection
    if cfg.token_decoder_variant == "prefix":
        non_emb += d * cfg.prefix_length * dt + cfg.prefix_length * dt
    else:
        non_emb += d * cfg.block_length * dt + cfg.block_length * dt
    # embedder
    if cfg.embedder_variant == "lookup":
        emb += v * cfg.d_emb
        if cfg.d_emb * cfg.block_length != d:
            non_emb += cfg.block_length * cfg.d_emb * d + d
    else:
        de = cfg.encoder_dim
        emb += v * de
        non_emb += cfg.encoder_layers * _layer_params(de) + 2 * de
        if cfg.embedder_variant == "encoder":
            non_emb += cfg.block_length * de * d + d
        else:
            non_emb += cfg.n_cls * de * d + d
            non_emb += cfg.n_cls * de  # trainable CLS slots
    emb += v * dt  # token-decoder table
    emb += dt * v + v  # classifier
    return non_emb + emb, non_emb
