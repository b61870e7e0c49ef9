"""Two-stage generation engines.

Block engine: prefill runs the embedder and block decoder once over all
prompt blocks (one parallel forward that fills the block KV cache) and
never touches the token decoder; decode works one token at a time against
a local KV cache bounded by the local sequence length, reset at every
block boundary. Pending work (completing a block, re-deriving prefix
state) is performed lazily at the step that needs it, so stopping at EOS
never pays for an unused block-decoder step.

The vanilla engine is the standard full-cache prefill+decode baseline.
Both preallocate their KV buffers at capacity; cache accounting reports
those allocations, which is what the cost model predicts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .autograd import Tensor, no_grad
from .errors import GenerationError
from .model import BlockLM, VanillaLM

_SAMPLE_TAG = 0x5EED5


@dataclass(frozen=True)
class Sampler:
    kind: str = "greedy"  # greedy | temperature | top_k
    temperature: float = 1.0
    top_k: int = 0

    def __post_init__(self):
        if self.kind not in ("greedy", "temperature", "top_k"):
            raise GenerationError(f"unknown sampler kind {self.kind!r}")
        if self.kind == "temperature" and self.temperature <= 0:
            raise GenerationError(f"temperature must be > 0, got {self.temperature}")
        if self.kind == "top_k" and self.top_k < 1:
            raise GenerationError(f"top_k must be >= 1, got {self.top_k}")


def _sample(logits: np.ndarray, sampler: Sampler, rng) -> np.ndarray:
    """logits (B, V) -> token ids (B,)."""
    if sampler.kind == "greedy":
        return logits.argmax(axis=1)
    x = logits.astype(np.float64) / max(sampler.temperature, 1e-30)
    if sampler.kind == "top_k":
        k = min(sampler.top_k, x.shape[1])
        kth = np.partition(x, -k, axis=1)[:, -k][:, None]
        x = np.where(x < kth, -np.inf, x)
    x -= x.max(axis=1, keepdims=True)
    p = np.exp(x)
    p /= p.sum(axis=1, keepdims=True)
    u = rng.random((x.shape[0], 1))
    return (p.cumsum(axis=1) < u).sum(axis=1).clip(0, x.shape[1] - 1)


def pad_prompt(prompt: np.ndarray, block_length: int, pad_id: int,
               max_len: int | None = None):
    """Left-pad a prompt to a block boundary; returns (padded, pad_count)."""
    prompt = np.asarray(prompt, dtype=np.int32)
    if prompt.ndim == 1:
        prompt = prompt[None, :]
    if prompt.shape[1] == 0:
        raise GenerationError("prompt is empty")
    a = (-prompt.shape[1]) % block_length
    if max_len is not None and prompt.shape[1] + a > max_len:
        raise GenerationError(
            f"prompt of {prompt.shape[1]} tokens (+{a} pad) exceeds {max_len} "
            "(no room left to generate)")
    if a == 0:
        return prompt, 0
    pads = np.full((prompt.shape[0], a), pad_id, dtype=np.int32)
    return np.concatenate([pads, prompt], axis=1), a


@dataclass
class GenState:
    position: int            # absolute tokens so far, left padding included
    block_index: int         # completed blocks fed to the block decoder
    tokens_in_block: int
    pending: str             # "start" | "token" | "block"
    context: np.ndarray      # (B, D) context embedding for the current block
    cur_block: np.ndarray    # (B, L_B) tokens of the block being decoded
    last_tokens: np.ndarray  # (B,)
    rng: np.random.Generator
    finished: np.ndarray     # (B,) bool
    block_state: dict = field(default_factory=dict)

    @property
    def batch(self) -> int:
        return self.finished.shape[0]


class _StageFlops:
    """Per-stage FLOP snapshots from the model's component meters."""

    def __init__(self, model):
        self.model = model
        self.prefill = {k: 0 for k in model.meters()}
        self.decode = {k: 0 for k in model.meters()}

    def _snap(self):
        return {k: m.flops for k, m in self.model.meters().items()}

    def measure(self, stage):
        before = self._snap()

        class _Ctx:
            def __enter__(_s):
                return _s

            def __exit__(_s, *exc):
                after = self._snap()
                bucket = getattr(self, stage)
                for k in bucket:
                    bucket[k] += after[k] - before[k]
                return False

        return _Ctx()


class BlockEngine:
    def __init__(self, model: BlockLM, batch_size: int = 1, seed: int = 0):
        self.model = model
        self.cfg = model.cfg
        self.batch_size = batch_size
        self.seed = seed
        cfg = self.cfg
        self.block_caches = model.block_dec.make_caches(batch_size, cfg.n_blocks)
        self.local_caches = model.tok_dec.make_caches(batch_size, cfg.local_len())
        self.cross_caches = None
        if cfg.token_decoder_variant == "cross_attention":
            self.cross_caches = model.tok_dec.make_caches(batch_size, cfg.block_length)
        self.flops = _StageFlops(model)
        self.block_dec_steps = 0
        self.token_dec_steps = 0

    # --- accounting ------------------------------------------------------

    def cache_entries_per_stream(self) -> dict:
        cfg = self.cfg
        entries = {"block": cfg.n_blocks, "local": cfg.local_len()}
        if self.cross_caches is not None:
            entries["local"] += cfg.block_length
        return entries

    def cache_bytes(self) -> int:
        total = sum(c.nbytes for c in self.block_caches)
        total += sum(c.nbytes for c in self.local_caches)
        if self.cross_caches is not None:
            total += sum(c.nbytes for c in self.cross_caches)
        return total

    def used_entries(self) -> dict:
        out = {"block": max((c.length for c in self.block_caches), default=0),
               "local": max((c.length for c in self.local_caches), default=0)}
        if self.cross_caches is not None:
            out["local"] += max((c.length for c in self.cross_caches), default=0)
        return out

    def reset(self):
        for c in self.block_caches:
            c.reset()
        self._reset_local()
        self.model.reset_meters()
        self.flops = _StageFlops(self.model)
        self.block_dec_steps = 0
        self.token_dec_steps = 0

    def _reset_local(self):
        for c in self.local_caches:
            c.reset()
        if self.cross_caches is not None:
            for c in self.cross_caches:
                c.reset()

    # --- stages ------------------------------------------------------------

    def prefill(self, prompt: np.ndarray) -> GenState:
        """Embedder + block decoder over all prompt blocks; the token
        decoder does no work here (its prefix state is derived lazily on
        the first decode step)."""
        cfg = self.cfg
        prompt = np.asarray(prompt, dtype=np.int32)
        if prompt.ndim == 1:
            prompt = prompt[None, :]
        b, tp = prompt.shape
        if b != self.batch_size:
            raise GenerationError(f"engine allocated for batch {self.batch_size}, "
                                  f"got {b} streams")
        if tp == 0 or tp % cfg.block_length:
            raise GenerationError(f"prefill needs a block-aligned prompt, got {tp} tokens "
                                  f"(block_length {cfg.block_length}); use pad_prompt")
        if tp > cfg.context_length - cfg.block_length:
            raise GenerationError(f"prompt of {tp} tokens exceeds context "
                                  f"{cfg.context_length} minus one block")
        n = tp // cfg.block_length
        with no_grad(), self.flops.measure("prefill"):
            embs = self.model.embed_blocks(prompt)
            ctx = self.model.contexts(embs, caches=self.block_caches)
            context = np.ascontiguousarray(ctx.data[:, -1])
        return GenState(
            position=tp, block_index=n, tokens_in_block=0, pending="start",
            context=context, cur_block=np.full((b, cfg.block_length), cfg.pad_id, np.int32),
            last_tokens=np.zeros(b, dtype=np.int64),
            rng=np.random.default_rng(np.random.SeedSequence((self.seed, _SAMPLE_TAG))),
            finished=np.zeros(b, dtype=bool),
        )

    def decode_step(self, state: GenState, sampler: Sampler, *,
                    stop_on_eos: bool = True) -> np.ndarray | None:
        """Emit one token per stream; None once the context is exhausted
        or every stream has finished."""
        cfg = self.cfg
        if bool(state.finished.all()) or state.position >= cfg.context_length:
            state.finished[:] = True
            return None
        with no_grad(), self.flops.measure("decode"):
            if state.pending == "block":
                embs = self.model.embed_blocks(state.cur_block)
                ctx = self.model.contexts(embs, caches=self.block_caches,
                                          pos_offset=state.block_index)
                state.context = np.ascontiguousarray(ctx.data[:, -1])
                state.block_index += 1
                self.block_dec_steps += 1
                state.cur_block[:] = cfg.pad_id
                state.pending = "start"
            if state.pending == "start":
                self._reset_local()
                state.block_state = self.model.local_start(state.context)
                inputs = state.block_state["inputs"]
                mem = state.block_state.get("mem")
                h = self.model.tok_dec.forward(inputs, causal=True, pos_offset=0,
                                               caches=self.local_caches, cross_ctx=mem,
                                               cross_caches=self.cross_caches)
                state.tokens_in_block = 0
            else:  # "token"
                inp, pos = self.model.local_token_input(state.block_state,
                                                        state.last_tokens,
                                                        state.tokens_in_block)
                h = self.model.tok_dec.forward(inp, causal=True, pos_offset=pos,
                                               caches=self.local_caches,
                                               cross_caches=self.cross_caches)
            self.token_dec_steps += 1
            logits = self.model.head(ops.narrow(h, 1, h.shape[1] - 1, 1)).data
            tokens = _sample(logits.reshape(state.batch, -1), sampler, state.rng)
        tokens = np.where(state.finished, cfg.pad_id, tokens)
        if stop_on_eos:
            state.finished |= tokens == cfg.eos_id
        state.cur_block[:, state.tokens_in_block] = tokens
        state.last_tokens = tokens
        state.tokens_in_block += 1
        state.position += 1
        state.pending = "block" if state.tokens_in_block == cfg.block_length else "token"
        if state.position >= cfg.context_length:
            state.finished[:] = True
        return tokens

    def generate(self, prompt, max_new: int, sampler: Sampler | None = None, *,
                 stop_on_eos: bool = True) -> np.ndarray:
        """Single-stream generation; returns generated ids (EOS excluded)."""
        if max_new < 1:
            raise GenerationError(f"max_new must be >= 1, got {max_new}")
        sampler = sampler or Sampler()
        padded, _ = pad_prompt(prompt, self.cfg.block_length, self.cfg.pad_id,
                               self.cfg.context_length - self.cfg.block_length)
        self.reset()
        state = self.prefill(padded)
        out = []
        for _ in range(max_new):
            tok = self.decode_step(state, sampler, stop_on_eos=stop_on_eos)
            if tok is None:
                break
            if stop_on_eos and tok[0] == self.cfg.eos_id:
                break
            out.append(int(tok[0]))
            if state.finished.all():
                break
        return np.asarray(out, dtype=np.int32)

    def generate_batch(self, prompts, max_new: int, sampler: Sampler | None = None, *,
                       stop_on_eos: bool = True) -> list[np.ndarray]:
        """Batched generation on a common block cadence.

        Streams are left-padded to one shared block-aligned length;
        finished streams keep their slot (masked with PAD), so shapes stay
        stable for throughput measurement.
        """
        sampler = sampler or Sampler()
        prompts = [np.asarray(p, dtype=np.int32) for p in prompts]
        if len(prompts) != self.batch_size:
            raise GenerationError(f"engine allocated for batch {self.batch_size}, "
                                  f"got {len(prompts)} prompts")
        if any(p.size == 0 for p in prompts):
            raise GenerationError("prompt is empty")
        lb = self.cfg.block_length
        width = max(p.size for p in prompts)
        width += (-width) % lb
        grid = np.full((len(prompts), width), self.cfg.pad_id, dtype=np.int32)
        for i, p in enumerate(prompts):
            grid[i, width - p.size:] = p
        if width > self.cfg.context_length - lb:
            raise GenerationError(f"prompts of {width} tokens exceed context "
                                  f"{self.cfg.context_length} minus one block")
        self.reset()
        state = self.prefill(grid)
        rows: list[list[int]] = [[] for _ in prompts]
        alive = np.ones(len(prompts), dtype=bool)
        for _ in range(max_new):
            tok = self.decode_step(state, sampler, stop_on_eos=stop_on_eos)
            if tok is None:
                break
            for i in range(len(prompts)):
                if alive[i] and stop_on_eos and tok[i] == self.cfg.eos_id:
                    alive[i] = False
                if alive[i]:
                    rows[i].append(int(tok[i]))
            if not alive.any() or state.finished.all():
                break
        return [np.asarray(r, dtype=np.int32) for r in rows]


class VanillaEngine:
    """Standard full-cache prefill + decode baseline."""

    def __init__(self, model: VanillaLM, batch_size: int = 1, seed: int = 0):
        self.model = model
        self.cfg = model.cfg
        self.batch_size = batch_size
        self.seed = seed
        self.caches = model.dec.make_caches(batch_size, self.cfg.context_length)
        self.flops = _StageFlops(model)
        self.decode_steps = 0
        self._logits: np.ndarray | None = None

    def cache_entries_per_stream(self) -> dict:
        return {"decoder": self.cfg.context_length}

    def cache_bytes(self) -> int:
        return sum(c.nbytes for c in self.caches)

    def used_entries(self) -> dict:
        return {"decoder": max((c.length for c in self.caches), default=0)}

    def reset(self):
        for c in self.caches:
            c.reset()
        self.model.reset_meters()
        self.flops = _StageFlops(self.model)
        self.decode_steps = 0
        self._logits = None

    def prefill(self, prompt: np.ndarray) -> GenState:
        prompt = np.asarray(prompt, dtype=np.int32)
        if prompt.ndim == 1:
            prompt = prompt[None, :]
        b, tp = prompt.shape
        if b != self.batch_size:
            raise GenerationError(f"engine allocated for batch {self.batch_size}, "
                                  f"got {b} streams")
        if tp == 0:
            raise GenerationError("prompt is empty")
        if tp >= self.cfg.context_length:
            raise GenerationError(f"prompt of {tp} tokens exceeds context "
                                  f"{self.cfg.context_length} minus one token")
        with no_grad(), self.flops.measure("prefill"):
            h = self.model.hidden(prompt, caches=self.caches)
            self._logits = self.model.head(ops.narrow(h, 1, tp - 1, 1)).data
        return GenState(
            position=tp, block_index=0, tokens_in_block=0, pending="token",
            context=np.zeros((b, 1), np.float32),
            cur_block=np.zeros((b, 1), np.int32),
            last_tokens=np.zeros(b, dtype=np.int64),
            rng=np.random.default_rng(np.random.SeedSequence((self.seed, _SAMPLE_TAG))),
            finished=np.zeros(b, dtype=bool),
        )

    def decode_step(self, state: GenState, sampler: Sampler, *,
                    stop_on_eos: bool = True) -> np.ndarray | None:
        cfg = self.cfg
        if bool(state.finished.all()) or state.position >= cfg.context_length:
            state.finished[:] = True
            return None
        with no_grad(), self.flops.measure("decode"):
            if self._logits is None:
                h = self.model.hidden(state.last_tokens.reshape(-1, 1).astype(np.int32),
                                      caches=self.caches, pos_offset=state.position - 1)
                self._logits = self.model.head(h).data
            logits = self._logits
            self._logits = None
            self.decode_steps += 1
            tokens = _sample(logits.reshape(state.batch, -1), sampler, state.rng)
        tokens = np.where(state.finished, cfg.pad_id, tokens)
        if stop_on_eos:
            state.finished |= tokens == cfg.eos_id
        state.last_tokens = tokens
        state.position += 1
        if state.position >= cfg.context_length:
            state.finished[:] = True
        return tokens

    def generate(self, prompt, max_new: int, sampler: Sampler | None = None, *,
                 stop_on_eos: bool = True) -> np.ndarray:
        if max_new < 1:
            raise GenerationError(f"max_new must be >= 1, got {max_new}")
        sampler = sampler or Sampler()
        self.reset()
        state = self.prefill(np.asarray(prompt, dtype=np.int32))
        out = []
        for _ in range(max_new):
            tok = self.decode_step(state, sampler, stop_on_eos=stop_on_eos)
            if tok is None:
                break
            if stop_on_eos and tok[0] == self.cfg.eos_id:
                break
            out.append(int(tok[0]))
            if state.finished.all():
                break
        return np.asarray(out, dtype=np.int32)


def reference_next_logits(model, ids: np.ndarray) -> np.ndarray:
    """Stateless next-token logits by full recomputation (no caches).

    The independent oracle for incremental/full equivalence: block models
    re-derive the current context from scratch and run one teacher-forced
    pass over the partial block; vanilla models run one full pass.
    """
    ids = np.asarray(ids, dtype=np.int32)
    if ids.ndim == 1:
        ids = ids[None, :]
    with no_grad():
        if isinstance(model, VanillaLM):
            h = model.hidden(ids)
            return model.head(ops.narrow(h, 1, ids.shape[1] - 1, 1)).data[:, 0]
        cfg = model.cfg
        lb = cfg.block_length
        n_complete = ids.shape[1] // lb
        r = ids.shape[1] % lb
        embs = model.embed_blocks(ids[:, :n_complete * lb])
        ctx = model.contexts(embs)
        context = np.ascontiguousarray(ctx.data[:, n_complete - 1])
        st = model.local_start(context)
        parts = [st["inputs"]]
        for j in range(1, r + 1):
            inp, _ = model.local_token_input(st, ids[:, n_complete * lb + j - 1], j)
            parts.append(inp)
        seq = parts[0] if len(parts) == 1 else ops.concat(parts, axis=1)
        h = model.tok_dec.forward(seq, causal=True, cross_ctx=st.get("mem"))
        return model.head(ops.narrow(h, 1, seq.shape[1] - 1, 1)).data[:, 0]


def make_engine(model, batch_size: int = 1, seed: int = 0):
    if isinstance(model, VanillaLM):
        return VanillaEngine(model, batch_size, seed)
    return BlockEngine(model, batch_size, seed)
