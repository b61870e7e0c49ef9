"""Byte-level tokenization, document packing, and batch iteration.

Packing gives every document a random-length leading PAD run (uniform on
{0..L_B-1}), an EOS, and a PAD tail out to the next block boundary, so no
block ever mixes two documents and intra-block padding is in-distribution
at inference time. Units are concatenated and sliced into rows of the
context length; a trailing partial row is dropped.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor_io
from .config import ModelConfig
from .errors import DataError

BYTE_VOCAB = 259  # 256 raw bytes + BOS/EOS/PAD

DOC_SEPARATOR = b"\x1e"  # ASCII record separator splits multi-document files


def tokenize(text) -> np.ndarray:
    """Bytes (or str, encoded UTF-8) to int32 ids; bytes map to themselves."""
    if isinstance(text, str):
        text = text.encode("utf-8")
    return np.frombuffer(bytes(text), dtype=np.uint8).astype(np.int32)


def detokenize(ids, vocab_size: int = BYTE_VOCAB) -> bytes:
    """Ids back to bytes; specials (BOS/EOS/PAD) are stripped."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        raise DataError(f"token id out of range: [{ids.min()}, {ids.max()}] "
                        f"vs vocab {vocab_size}")
    keep = ids[ids < 256]
    return keep.astype(np.uint8).tobytes()


@dataclass
class PackedBatch:
    token_ids: np.ndarray      # (B, L) int32
    doc_start_mask: np.ndarray  # (B, L) bool, true at each document unit start
    loss_mask: np.ndarray      # (B, L) bool, false at PAD and each document's block 0


@dataclass
class PackedDataset:
    token_ids: np.ndarray      # (R, L)
    doc_start_mask: np.ndarray
    loss_mask: np.ndarray
    pad_lengths: np.ndarray    # leading PAD run drawn for each document

    @property
    def n_rows(self) -> int:
        return self.token_ids.shape[0]

    def row_batch(self, rows) -> PackedBatch:
        return PackedBatch(self.token_ids[rows], self.doc_start_mask[rows],
                           self.loss_mask[rows])


def pack_corpus(documents, cfg: ModelConfig, seed: int) -> PackedDataset:
    """Pack tokenized documents into rows of cfg.context_length."""
    documents = [np.asarray(d, dtype=np.int32) for d in documents]
    if not documents:
        raise DataError("empty corpus: no documents to pack")
    lb = cfg.block_length
    pad, eos = cfg.pad_id, cfg.eos_id
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5EED1)))

    ids_parts = []
    start_parts = []
    loss_parts = []
    pad_lengths = np.empty(len(documents), dtype=np.int64)
    for i, doc in enumerate(documents):
        if doc.size and (doc.min() < 0 or doc.max() >= cfg.vocab_size):
            raise DataError(f"document {i} has token ids outside vocab {cfg.vocab_size}")
        a = int(rng.integers(0, lb)) if lb > 1 else 0
        pad_lengths[i] = a
        body = a + doc.size + 1
        tail = (-body) % lb
        unit = np.full(body + tail, pad, dtype=np.int32)
        unit[a:a + doc.size] = doc
        unit[a + doc.size] = eos
        ids_parts.append(unit)
        start = np.zeros(unit.size, dtype=bool)
        start[0] = True
        start_parts.append(start)
        loss = unit != pad
        loss[:lb] = False  # the document's first block has no usable context
        loss_parts.append(loss)

    ids = np.concatenate(ids_parts)
    n_rows = ids.size // cfg.context_length
    if n_rows == 0:
        raise DataError(
            f"corpus too small: {ids.size} packed tokens < one row of {cfg.context_length}")
    cut = n_rows * cfg.context_length
    return PackedDataset(
        token_ids=ids[:cut].reshape(n_rows, cfg.context_length),
        doc_start_mask=np.concatenate(start_parts)[:cut].reshape(n_rows, cfg.context_length),
        loss_mask=np.concatenate(loss_parts)[:cut].reshape(n_rows, cfg.context_length),
        pad_lengths=pad_lengths,
    )


def batch_iter(packed: PackedDataset, batch_size: int, seed: int, epochs: int | None = None):
    """Deterministic shuffled batches; every row appears once per epoch."""
    if packed.n_rows < batch_size:
        raise DataError(f"need at least one full batch: {packed.n_rows} rows "
                        f"< batch_size {batch_size}")
    epoch = 0
    while epochs is None or epoch < epochs:
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5EED2, epoch)))
        order = rng.permutation(packed.n_rows)
        for lo in range(0, packed.n_rows, batch_size):
            yield packed.row_batch(order[lo:lo + batch_size])
        epoch += 1


def eval_rows(text_ids: np.ndarray, cfg: ModelConfig) -> PackedBatch:
    """One standalone input -> evaluation rows.

    Applies the evaluation convention: left padding of length L_B - 1
    before the first token, an EOS, and a PAD tail; then row-slices like
    packing does (the tail row is kept, PAD-completed).
    """
    lb, L = cfg.block_length, cfg.context_length
    a = lb - 1
    body = a + text_ids.size + 1
    total = body + (-body) % L if body % L else body
    ids = np.full(total, cfg.pad_id, dtype=np.int32)
    ids[a:a + text_ids.size] = text_ids
    ids[a + text_ids.size] = cfg.eos_id
    start = np.zeros(total, dtype=bool)
    start[0] = True
    loss = ids != cfg.pad_id
    loss[:lb] = False
    n_rows = total // L
    return PackedBatch(ids.reshape(n_rows, L), start.reshape(n_rows, L),
                       loss.reshape(n_rows, L))


def save_shard(path, packed: PackedDataset) -> None:
    tensor_io.save_tensors(path, {
        "token_ids": packed.token_ids.astype(np.int32),
        "doc_start_mask": packed.doc_start_mask.astype(np.uint8),
        "loss_mask": packed.loss_mask.astype(np.uint8),
        "pad_lengths": packed.pad_lengths.astype(np.int32),
    })


def load_shard(path) -> PackedDataset:
    t = tensor_io.load_tensors(path)
    try:
        return PackedDataset(
            token_ids=t["token_ids"].astype(np.int32),
            doc_start_mask=t["doc_start_mask"].astype(bool),
            loss_mask=t["loss_mask"].astype(bool),
            pad_lengths=t["pad_lengths"].astype(np.int64),
        )
    except KeyError as exc:
        raise DataError(f"{path}: not a packed shard (missing {exc})") from None


def load_documents(paths, split: bool = False) -> list[bytes]:
    """Read corpus files; with split=True each file may hold multiple
    documents separated by the 0x1E record-separator byte."""
    docs: list[bytes] = []
    for p in paths:
        raw = Path(p).read_bytes()
        if split:
            docs.extend(d for d in raw.split(DOC_SEPARATOR) if d)
        elif raw:
            docs.append(raw)
    if not docs:
        raise DataError(f"no documents found in {list(map(str, paths))}")
    return docs


_WORDS = (
    "the of and to in is was for on that with as his they at be this from have or "
    "one had by word but not what all were when your can said there use an each "
    "which she how their will other about out many then them these so some her "
    "would make like him into time has look two more write go see number no way "
    "could people my than first water been call who oil its now find long down "
    "day did get come made may part over new sound take only little work know "
    "place year live me back give most very after thing our just name good "
    "sentence man think say great where help through much before line right too "
    "mean old any same tell boy follow came want show also around form three "
    "small set put end does another well large must big even such because turn "
    "here why ask went men read need land different home us move try kind hand "
    "picture again change off play spell air away animal house point page letter "
    "mother answer found study still learn should america world"
).split()


def synth_corpus(n_bytes: int, seed: int, avg_doc_bytes: int = 2000) -> list[bytes]:
    """Deterministic english-ish word-salad corpus for training checks.

    Zipf-weighted words, sentence and paragraph structure; enough
    regularity that a byte model's loss falls well below ln(V) quickly.
    """
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5EED3)))
    ranks = np.arange(1, len(_WORDS) + 1, dtype=np.float64)
    probs = 1.0 / ranks
    probs /= probs.sum()
    docs: list[bytes] = []
    total = 0
    while total < n_bytes:
        target = max(200, int(rng.normal(avg_doc_bytes, avg_doc_bytes / 3)))
        parts: list[str] = []
        size = 0
        while size < target:
            n_words = int(rng.integers(4, 13))
            words = rng.choice(len(_WORDS), size=n_words, p=probs)
            sent = " ".join(_WORDS[w] for w in words).capitalize() + "."
            if rng.random() < 0.12:
                sent += "\n\n"
            else:
                sent += " "
            parts.append(sent)
            size += len(sent)
        doc = "".join(parts).strip().encode("utf-8")
        docs.append(doc)
        total += len(doc)
    return docs
