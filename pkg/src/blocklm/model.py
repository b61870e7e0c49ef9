"""The three-component block language model and the vanilla baseline.

Block path: an embedder folds each block of L_B tokens into one D-vector;
the causal block decoder turns those into context embeddings (output at
block i decodes block i+1); the token decoder decodes one block at a time
from its context embedding alone, so block i's logits depend only on
(context, block-i tokens). Spans of blocks are folded into the batch axis
so the token decoder never sees across a block boundary by construction.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from . import ops, tensor_io
from .autograd import FlopMeter, Tensor, parameter
from .config import ModelConfig, validate_model
from .errors import ConfigError, ShapeError, UptrainError, VariantError
from .layers import TransformerStack, _linear_init, _zeros

INIT_STD = 0.02


def _table_init(rng, rows: int, cols: int) -> Tensor:
    return parameter(rng.normal(0.0, INIT_STD, size=(rows, cols)).astype(np.float32))


class LookupEmbedder:
    """Concatenated per-token embeddings; optional projection when the
    table width times L_B differs from the model dim (uptraining shape)."""

    def __init__(self, cfg: ModelConfig, rng):
        self.cfg = cfg
        self.table = _table_init(rng, cfg.vocab_size, cfg.d_emb)
        self.proj = None
        if cfg.d_emb * cfg.block_length != cfg.model_dim:
            self.proj = _linear_init(rng, cfg.block_length * cfg.d_emb, cfg.model_dim)
            self.proj_b = _zeros(cfg.model_dim)

    def __call__(self, ids: np.ndarray) -> Tensor:
        b, t = ids.shape
        n = t // self.cfg.block_length
        e = ops.embedding(self.table, ids)  # (B, T, d_emb)
        x = ops.reshape(e, (b, n, self.cfg.block_length * self.cfg.d_emb))
        if self.proj is not None:
            x = ops.linear(x, self.proj, self.proj_b)
        return x

    def params(self) -> dict:
        p = {"emb.table": self.table}
        if self.proj is not None:
            p["emb.proj"] = self.proj
            p["emb.proj_b"] = self.proj_b
        return p


class EncoderEmbedder:
    """Small bidirectional encoder over each block; hidden states are
    concatenated and projected to the model dim."""

    def __init__(self, cfg: ModelConfig, rng):
        self.cfg = cfg
        self.table = _table_init(rng, cfg.vocab_size, cfg.encoder_dim)
        self.enc = TransformerStack("emb.enc", cfg.encoder_layers, cfg.encoder_dim,
                                    cfg.encoder_heads, cfg.block_length + cfg.n_cls, rng)
        self.proj = _linear_init(rng, cfg.block_length * cfg.encoder_dim, cfg.model_dim)
        self.proj_b = _zeros(cfg.model_dim)

    def __call__(self, ids: np.ndarray) -> Tensor:
        cfg = self.cfg
        b, t = ids.shape
        n = t // cfg.block_length
        folded = ids.reshape(b * n, cfg.block_length)
        e = ops.embedding(self.table, folded)
        h = self.enc.forward(e, causal=False)
        x = ops.reshape(h, (b * n, cfg.block_length * cfg.encoder_dim))
        x = ops.linear(x, self.proj, self.proj_b)
        return ops.reshape(x, (b, n, cfg.model_dim))

    def params(self) -> dict:
        p = {"emb.enc_table": self.table, "emb.proj": self.proj, "emb.proj_b": self.proj_b}
        p.update(self.enc.params("emb.enc"))
        return p


class ClsEmbedder(EncoderEmbedder):
    """Encoder embedder that reads the block through trainable CLS slots."""

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__(cfg, rng)
        self.cls_slots = _table_init(rng, cfg.n_cls, cfg.encoder_dim)
        self.proj = _linear_init(rng, cfg.n_cls * cfg.encoder_dim, cfg.model_dim)
        self.proj_b = _zeros(cfg.model_dim)

    def __call__(self, ids: np.ndarray) -> Tensor:
        cfg = self.cfg
        b, t = ids.shape
        n = t // cfg.block_length
        folded = ids.reshape(b * n, cfg.block_length)
        e = ops.embedding(self.table, folded)  # (B*n, L_B, enc)
        cls = ops.reshape(self.cls_slots, (1, cfg.n_cls, cfg.encoder_dim))
        cls = ops.add(cls, Tensor(np.zeros((b * n, cfg.n_cls, cfg.encoder_dim),
                                           dtype=np.float32)))
        h = self.enc.forward(ops.concat([cls, e], axis=1), causal=False)
        taken = ops.narrow(h, 1, 0, cfg.n_cls)
        x = ops.reshape(taken, (b * n, cfg.n_cls * cfg.encoder_dim))
        x = ops.linear(x, self.proj, self.proj_b)
        return ops.reshape(x, (b, n, cfg.model_dim))

    def params(self) -> dict:
        p = super().params()
        p["emb.cls_slots"] = self.cls_slots
        return p


def _make_embedder(cfg: ModelConfig, rng):
    if cfg.embedder_variant == "lookup":
        return LookupEmbedder(cfg, rng)
    if cfg.embedder_variant == "encoder":
        return EncoderEmbedder(cfg, rng)
    return ClsEmbedder(cfg, rng)


class BlockLM:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        problems = validate_model(cfg)
        if problems:
            raise ConfigError(problems)
        if cfg.kind != "block":
            raise ConfigError("BlockLM needs a block-kind config")
        self.cfg = cfg
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5EED4)))
        d, dt = cfg.model_dim, cfg.d_tok
        self.embedder = _make_embedder(cfg, rng)
        self.emb_meter = FlopMeter("embedder")
        self.block_dec = TransformerStack("block_dec", cfg.n_layers_block, d,
                                          cfg.n_heads, cfg.n_blocks, rng)
        cross = cfg.token_decoder_variant == "cross_attention"
        self.tok_dec = TransformerStack("tok_dec", cfg.n_layers_token, dt, cfg.n_heads,
                                        cfg.local_len(), rng, with_cross=cross)
        self.tok_table = _table_init(rng, cfg.vocab_size, dt)
        self.cls_head = _linear_init(rng, dt, cfg.vocab_size)
        self.cls_head_b = _zeros(cfg.vocab_size)
        if cfg.token_decoder_variant == "prefix":
            self.proj = _linear_init(rng, d, cfg.prefix_length * dt)
            self.proj_b = _zeros(cfg.prefix_length * dt)
        else:
            self.proj = _linear_init(rng, d, cfg.block_length * dt)
            self.proj_b = _zeros(cfg.block_length * dt)
        if cross:
            self.start = parameter(rng.normal(0.0, INIT_STD, size=(dt,)).astype(np.float32))

    # --- forward pieces -------------------------------------------------

    def embed_blocks(self, ids: np.ndarray) -> Tensor:
        """(B, n*L_B) token ids -> (B, n, D) input block embeddings."""
        if ids.ndim != 2 or ids.shape[1] % self.cfg.block_length:
            raise ShapeError(f"embed_blocks needs (B, n*L_B) ids, got {ids.shape} "
                             f"with L_B={self.cfg.block_length}")
        with self.emb_meter:
            return self.embedder(ids)

    def contexts(self, block_embs: Tensor, *, caches=None, pos_offset: int = 0) -> Tensor:
        """Causal block-decoder pass; output at block i is the context
        embedding that decodes block i+1."""
        if block_embs.shape[1] + pos_offset > self.cfg.n_blocks:
            raise ShapeError(f"{block_embs.shape[1]} blocks at offset {pos_offset} exceed "
                             f"the {self.cfg.n_blocks}-block context")
        return self.block_dec.forward(block_embs, causal=True, pos_offset=pos_offset,
                                      caches=caches)

    def _ctx_projection(self, ctx_rows: Tensor) -> Tensor:
        return ops.linear(ctx_rows, self.proj, self.proj_b)

    def token_forward(self, ctx_rows: Tensor, block_ids: np.ndarray, *,
                      record=None) -> Tensor:
        """Teacher-forced token decoder for one block per row.

        ctx_rows (M, D), block_ids (M, L_B) -> logits (M, L_B, V); row
        layouts per variant (prefix slots, context summation, or cross
        memory) are built here so callers never index positions.
        """
        cfg = self.cfg
        m = ctx_rows.shape[0]
        lb, p, dt = cfg.block_length, cfg.prefix_length, cfg.d_tok
        with self.tok_dec.meter:
            tok_e = ops.embedding(self.tok_table, block_ids)  # (M, L_B, dt)
            if cfg.token_decoder_variant == "prefix":
                pref = ops.reshape(self._ctx_projection(ctx_rows), (m, p, dt))
                seq = ops.concat([pref, tok_e], axis=1)
                h = self.tok_dec.forward(seq, causal=True, record=record)
                h = ops.narrow(h, 1, p - 1, lb)
            elif cfg.token_decoder_variant == "summation":
                ctx_p = ops.reshape(self._ctx_projection(ctx_rows), (m, lb, dt))
                if lb > 1:
                    zero = Tensor(np.zeros((m, 1, dt), dtype=np.float32))
                    shifted = ops.concat([zero, ops.narrow(tok_e, 1, 0, lb - 1)], axis=1)
                    seq = ops.add(ctx_p, shifted)
                else:
                    seq = ctx_p
                h = self.tok_dec.forward(seq, causal=True, record=record)
            else:  # cross_attention
                mem = ops.reshape(self._ctx_projection(ctx_rows), (m, lb, dt))
                start = ops.add(ops.reshape(self.start, (1, 1, dt)),
                                Tensor(np.zeros((m, 1, dt), dtype=np.float32)))
                if lb > 1:
                    seq = ops.concat([start, ops.narrow(tok_e, 1, 0, lb - 1)], axis=1)
                else:
                    seq = start
                h = self.tok_dec.forward(seq, causal=True, cross_ctx=mem, record=record)
            return ops.linear(h, self.cls_head, self.cls_head_b)

    def forward_loss(self, token_ids: np.ndarray, loss_mask: np.ndarray, *, record=None):
        """Mean masked cross-entropy over all decodable blocks of the rows.

        Block 0 of each row is structurally undecodable (no context) and
        is dropped on top of the pipeline's mask. Returns (loss, stats)
        where stats carries the (M, L_B) per-position nll grid and mask.
        """
        cfg = self.cfg
        b, L = token_ids.shape
        n = L // cfg.block_length
        embs = self.embed_blocks(token_ids)
        ctx = self.contexts(embs)
        m = b * (n - 1)
        ctx_rows = ops.reshape(ops.narrow(ctx, 1, 0, n - 1), (m, cfg.model_dim))
        targets = token_ids[:, cfg.block_length:].reshape(m, cfg.block_length)
        mask = loss_mask[:, cfg.block_length:].reshape(m, cfg.block_length)
        logits = self.token_forward(ctx_rows, targets, record=record)
        loss, nll = ops.cross_entropy(
            ops.reshape(logits, (m * cfg.block_length, cfg.vocab_size)),
            targets.reshape(-1), mask.reshape(-1))
        stats = {
            "nll": nll.reshape(m, cfg.block_length),
            "mask": mask,
            "count": int(mask.sum()),
        }
        return loss, stats

    # --- incremental decoding hooks (used by the inference engine) ------

    def local_start(self, context: np.ndarray) -> dict:
        """Variant state for a fresh block given its context embedding (B, D)."""
        cfg = self.cfg
        b = context.shape[0]
        lb, p, dt = cfg.block_length, cfg.prefix_length, cfg.d_tok
        with self.tok_dec.meter:
            ctx_t = Tensor(context)
            if cfg.token_decoder_variant == "prefix":
                pref = ops.reshape(self._ctx_projection(ctx_t), (b, p, dt))
                return {"inputs": pref, "pos": 0}
            proj = ops.reshape(self._ctx_projection(ctx_t), (b, lb, dt))
            if cfg.token_decoder_variant == "summation":
                return {"inputs": ops.narrow(proj, 1, 0, 1), "ctx_proj": proj.data,
                        "pos": 0}
            start = ops.add(ops.reshape(self.start, (1, 1, dt)),
                            Tensor(np.zeros((b, 1, dt), dtype=np.float32)))
            return {"inputs": start, "mem": proj, "pos": 0}

    def local_token_input(self, block_state: dict, prev_tokens: np.ndarray, j: int):
        """Input row for local position of token j given token j-1."""
        cfg = self.cfg
        with self.tok_dec.meter:
            e = ops.embedding(self.tok_table, prev_tokens.reshape(-1, 1))
            if cfg.token_decoder_variant == "prefix":
                return e, cfg.prefix_length + j - 1
            if cfg.token_decoder_variant == "summation":
                ctx_j = Tensor(block_state["ctx_proj"][:, j:j + 1])
                return ops.add(e, ctx_j), j
            return e, j

    def head(self, h: Tensor) -> Tensor:
        with self.tok_dec.meter:
            return ops.linear(h, self.cls_head, self.cls_head_b)

    def params(self) -> dict:
        p = {}
        p.update(self.embedder.params())
        p.update(self.block_dec.params("block_dec"))
        p.update(self.tok_dec.params("tok_dec"))
        p["tok_dec.table"] = self.tok_table
        if self.cfg.token_decoder_variant == "prefix":
            p["proj.prefix"] = self.proj
            p["proj.prefix_b"] = self.proj_b
        elif self.cfg.token_decoder_variant == "summation":
            p["proj.sum"] = self.proj
            p["proj.sum_b"] = self.proj_b
        else:
            p["proj.cross"] = self.proj
            p["proj.cross_b"] = self.proj_b
            p["tok_dec.start"] = self.start
        p["cls_head"] = self.cls_head
        p["cls_head_b"] = self.cls_head_b
        return p

    def meters(self) -> dict:
        return {"embedder": self.emb_meter, "block_decoder": self.block_dec.meter,
                "token_decoder": self.tok_dec.meter}

    def reset_meters(self):
        for m in self.meters().values():
            m.reset()


class VanillaLM:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        problems = validate_model(cfg)
        if problems:
            raise ConfigError(problems)
        if cfg.kind != "vanilla":
            raise ConfigError("VanillaLM needs a vanilla-kind config")
        self.cfg = cfg
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5EED4)))
        d = cfg.model_dim
        self.table = _table_init(rng, cfg.vocab_size, d)
        self.dec = TransformerStack("dec", cfg.n_layers_token, d, cfg.n_heads,
                                    cfg.context_length, rng)
        self.cls_head = _linear_init(rng, d, cfg.vocab_size)
        self.cls_head_b = _zeros(cfg.vocab_size)

    def hidden(self, ids: np.ndarray, *, caches=None, pos_offset: int = 0,
               record=None) -> Tensor:
        with self.dec.meter:
            e = ops.embedding(self.table, ids)
            return self.dec.forward(e, causal=True, pos_offset=pos_offset, caches=caches,
                                    record=record)

    def head(self, h: Tensor) -> Tensor:
        with self.dec.meter:
            return ops.linear(h, self.cls_head, self.cls_head_b)

    def forward_loss(self, token_ids: np.ndarray, loss_mask: np.ndarray, *, record=None):
        """Next-token loss; position 0 of each row is structurally excluded,
        the pipeline mask removes document-first tokens and PAD."""
        b, L = token_ids.shape
        h = self.hidden(token_ids, record=record)
        logits = self.head(ops.narrow(h, 1, 0, L - 1))
        targets = token_ids[:, 1:].reshape(-1)
        mask = loss_mask[:, 1:].reshape(-1)
        loss, nll = ops.cross_entropy(
            ops.reshape(logits, (b * (L - 1), self.cfg.vocab_size)), targets, mask)
        stats = {"nll": nll.reshape(b, L - 1), "mask": mask.reshape(b, L - 1),
                 "count": int(mask.sum())}
        return loss, stats

    def params(self) -> dict:
        p = {"emb.table": self.table}
        p.update(self.dec.params("dec"))
        p["cls_head"] = self.cls_head
        p["cls_head_b"] = self.cls_head_b
        return p

    def meters(self) -> dict:
        return {"decoder": self.dec.meter}

    def reset_meters(self):
        self.dec.meter.reset()


def build_model(cfg: ModelConfig, seed: int = 0):
    return VanillaLM(cfg, seed) if cfg.kind == "vanilla" else BlockLM(cfg, seed)


def save_checkpoint(model, path) -> None:
    """Weights in the named-tensor container + a JSON config sidecar."""
    tensor_io.save_tensors(path, {k: v.data for k, v in model.params().items()})
    sidecar = Path(str(path) + ".json")
    sidecar.write_text(json.dumps(dataclasses.asdict(model.cfg), indent=2) + "\n")


def load_checkpoint(path):
    sidecar = Path(str(path) + ".json")
    if not sidecar.exists():
        raise ConfigError(f"checkpoint sidecar not found: {sidecar}")
    cfg = ModelConfig(**json.loads(sidecar.read_text()))
    model = build_model(cfg, seed=0)
    tensors = tensor_io.load_tensors(path)
    params = model.params()
    missing = sorted(set(params) - set(tensors))
    extra = sorted(set(tensors) - set(params))
    if missing or extra:
        raise ConfigError(f"checkpoint/model tensor mismatch: missing {missing}, "
                          f"unexpected {extra}")
    for name, tensor in params.items():
        if tensors[name].shape != tensor.data.shape:
            raise ConfigError(f"checkpoint tensor {name} has shape {tensors[name].shape}, "
                              f"model expects {tensor.data.shape}")
        tensor.data[...] = tensors[name]
    return model


def init_from_vanilla(vanilla: VanillaLM, block_cfg: ModelConfig) -> BlockLM:
    """Uptraining initialization.

    Splits the vanilla layer stack in half (lower half -> block decoder,
    upper half -> token decoder), reuses the vanilla token table on both
    sides, makes the block embedding the mean of the block's vanilla token
    embeddings, and replicates the context embedding into every prefix.
    """
    vcfg = vanilla.cfg
    d = vcfg.model_dim
    problems = []
    if vcfg.n_layers_token % 2:
        problems.append(f"vanilla layer count {vcfg.n_layers_token} is odd; cannot split")
    half = vcfg.n_layers_token // 2
    if block_cfg.n_layers_block != half or block_cfg.n_layers_token != half:
        problems.append(f"block config must use {half}+{half} layers, got "
                        f"{block_cfg.n_layers_block}+{block_cfg.n_layers_token}")
    if block_cfg.model_dim != d or block_cfg.d_tok != d:
        problems.append(f"dims must match the vanilla model ({d}), got "
                        f"D={block_cfg.model_dim}, D_tok={block_cfg.d_tok}")
    if block_cfg.vocab_size != vcfg.vocab_size:
        problems.append(f"vocab mismatch: {block_cfg.vocab_size} vs {vcfg.vocab_size}")
    if block_cfg.n_heads != vcfg.n_heads:
        problems.append(f"head-count mismatch: {block_cfg.n_heads} vs {vcfg.n_heads}")
    if block_cfg.embedder_variant != "lookup" or block_cfg.d_emb != d:
        problems.append("uptraining needs the lookup embedder with emb_dim = vanilla dim "
                        f"(got variant {block_cfg.embedder_variant!r}, "
                        f"emb_dim {block_cfg.d_emb})")
    if block_cfg.token_decoder_variant != "prefix":
        problems.append("uptraining supports the prefix token decoder only")
    if problems:
        raise UptrainError("; ".join(problems))

    block = BlockLM(block_cfg, seed=0)
    lb, p = block_cfg.block_length, block_cfg.prefix_length

    def copy_layer(dst, src):
        for a, b in zip(dst.params("x").values(), src.params("x").values()):
            a.data[...] = b.data

    for i in range(half):
        copy_layer(block.block_dec.layers[i], vanilla.dec.layers[i])
        copy_layer(block.tok_dec.layers[i], vanilla.dec.layers[half + i])
    block.block_dec.final_g.data[...] = vanilla.dec.final_g.data
    block.block_dec.final_b.data[...] = vanilla.dec.final_b.data
    block.tok_dec.final_g.data[...] = vanilla.dec.final_g.data
    block.tok_dec.final_b.data[...] = vanilla.dec.final_b.data

    block.embedder.table.data[...] = vanilla.table.data
    eye = np.eye(d, dtype=np.float32) / np.float32(lb)
    block.embedder.proj.data[...] = np.concatenate([eye] * lb, axis=0)
    block.embedder.proj_b.data[...] = 0.0

    block.tok_table.data[...] = vanilla.table.data
    block.cls_head.data[...] = vanilla.cls_head.data
    block.cls_head_b.data[...] = vanilla.cls_head_b.data

    block.proj.data[...] = np.concatenate([np.eye(d, dtype=np.float32)] * p, axis=1)
    block.proj_b.data[...] = 0.0
    return block
