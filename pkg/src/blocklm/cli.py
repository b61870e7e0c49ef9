"""Command-line surface: pack, train, eval, generate, bench, cost,
uptrain-init, analyze.

All randomness flows from --seed; per-component streams are derived by
fixed tags, so identical invocations produce identical file outputs.
Exit codes: 0 success, 1 user error (bad flags, files, configs), 2 bug.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import backend, bench, costs, data, engine, model as model_mod, train as train_mod
from .config import ModelConfig, TrainConfig, load_config, validate_model
from .data import batch_iter, eval_rows, load_documents, pack_corpus, tokenize
from .errors import BlockLMError, ConfigError

log = logging.getLogger("blocklm")


def _setup_logging():
    level = os.environ.get("BLOCKLM_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise ConfigError(f"BLOCKLM_LOG must be error|info|debug, got {level!r}")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s")


def _write_csv(path_or_file, rows: list[dict]):
    if not rows:
        return
    fields: list[str] = []
    for row in rows:
        for k in row:
            if k not in fields:
                fields.append(k)
    own = isinstance(path_or_file, (str, Path))
    fh = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
    finally:
        if own:
            fh.close()


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_pack(args) -> int:
    mcfg, _ = load_config(args.config, args.set)
    docs = [tokenize(d) for d in load_documents(args.input, split=args.split_docs)]
    packed = pack_corpus(docs, mcfg, args.seed)
    out = _out_dir(args)
    shard = out / "shard.blkt"
    data.save_shard(shard, packed)
    print(f"packed {len(docs)} documents into {packed.n_rows} rows of "
          f"{mcfg.context_length} -> {shard}")
    return 0


def _packed_for_training(args, mcfg) -> data.PackedDataset:
    if args.shard:
        return data.load_shard(args.shard)
    docs = [tokenize(d) for d in load_documents(args.corpus, split=args.split_docs)]
    return pack_corpus(docs, mcfg, args.seed)


def cmd_train(args) -> int:
    mcfg, tcfg = load_config(args.config, args.set)
    if args.steps:
        tcfg = TrainConfig(**{**tcfg.__dict__, "total_steps": args.steps})
    if args.seed is not None:
        tcfg = TrainConfig(**{**tcfg.__dict__, "seed": args.seed})
    packed = _packed_for_training(args, mcfg)
    net = model_mod.build_model(mcfg, seed=tcfg.seed)
    history = train_mod.train_loop(net, packed, tcfg)
    out = _out_dir(args)
    ckpt = out / "model.blkt"
    model_mod.save_checkpoint(net, ckpt)
    _write_csv(out / "loss.csv", [
        {k: m[k] for k in ("step", "loss", "grad_norm", "lr", "tokens_seen")}
        for m in history])
    print(f"trained {len(history)} steps, final loss {history[-1]['loss']:.4f} -> {ckpt}")
    return 0


def cmd_eval(args) -> int:
    net = model_mod.load_checkpoint(args.ckpt)
    ids = tokenize(Path(args.input).read_bytes())
    rows = eval_rows(ids, net.cfg)
    batches = [rows.__class__(rows.token_ids[i:i + args.batch],
                              rows.doc_start_mask[i:i + args.batch],
                              rows.loss_mask[i:i + args.batch])
               for i in range(0, rows.token_ids.shape[0], args.batch)]
    result = bench.evaluate(net, batches)
    out = _out_dir(args)
    if "position_loss" in result:
        _write_csv(out / "position_loss.csv", [
            {"position": i, "loss": float(v), "count": int(c)}
            for i, (v, c) in enumerate(zip(result["position_loss"],
                                           result["position_counts"]))])
    off = result.get("abs_position_offset", 0)
    _write_csv(out / "abs_position_loss.csv", [
        {"position": off + i, "loss": float(v)}
        for i, v in enumerate(result.get("abs_position_loss", []))])
    print(f"loss {result['loss']:.6f} over {result['count']} positions")
    return 0


def _sampler_from_args(args) -> engine.Sampler:
    if args.temperature is not None:
        return engine.Sampler("temperature", temperature=args.temperature)
    if args.top_k is not None:
        return engine.Sampler("top_k", top_k=args.top_k,
                              temperature=1.0)
    return engine.Sampler("greedy")


def cmd_generate(args) -> int:
    net = model_mod.load_checkpoint(args.ckpt)
    ids = tokenize(args.prompt)
    eng = engine.make_engine(net, batch_size=1, seed=args.seed)
    out_ids = eng.generate(ids, args.max_new, _sampler_from_args(args))
    sys.stdout.buffer.write(data.detokenize(out_ids, net.cfg.vocab_size))
    sys.stdout.write("\n")
    return 0


def cmd_bench(args) -> int:
    rows = []
    for spec_item in args.config:
        mcfg, _ = load_config(spec_item, args.set)
        net = model_mod.build_model(mcfg, seed=args.seed)
        if args.prompt_len and args.gen_len:
            scenarios = [bench.BenchScenario("custom", args.prompt_len, args.gen_len,
                                             args.batch, args.reps, args.warmup)]
        else:
            scenarios = [bench.BenchScenario(s.name, s.prompt_len, s.gen_len,
                                             args.batch, args.reps, args.warmup)
                         for s in bench.desk_scenarios(args.batch)]
        for sc in scenarios:
            r = bench.run_benchmark(net, sc, seed=args.seed)
            rows.append({
                "config": spec_item, "model_kind": r.model_kind, "scenario": r.scenario,
                "batch": sc.batch_size, "prompt_len": sc.prompt_len,
                "gen_len": sc.gen_len,
                "tokens_per_sec": f"{r.tokens_per_sec:.3f}",
                "prefill_time_s": f"{r.prefill_time:.6f}",
                "decode_time_s": f"{r.decode_time:.6f}",
                "peak_cache_bytes": r.peak_cache_bytes,
                "cache_entries_per_stream": r.cache_entries_per_stream,
            })
    if args.out:
        out = _out_dir(args)
        _write_csv(out / "bench.csv", rows)
        print(f"wrote {out / 'bench.csv'}")
    else:
        _write_csv(sys.stdout, rows)
    return 0


def cmd_cost(args) -> int:
    mcfg, _ = load_config(args.config, args.set)
    scenarios = [args.scenario] if args.scenario != "all" else list(costs.SCENARIOS)
    rows = []
    for sc in scenarios:
        report = costs.cost_report(mcfg, sc, args.prompt_len, args.gen_len,
                                   args.batch, args.bytes_per_elem)
        rows.extend(costs.report_rows(Path(args.config).name, report))
    if args.out:
        out = _out_dir(args)
        _write_csv(out / "cost.csv", rows)
        print(f"wrote {out / 'cost.csv'}")
    else:
        _write_csv(sys.stdout, rows)
    return 0


def cmd_uptrain_init(args) -> int:
    vanilla = model_mod.load_checkpoint(args.vanilla_ckpt)
    if not isinstance(vanilla, model_mod.VanillaLM):
        raise ConfigError(f"{args.vanilla_ckpt} is not a vanilla checkpoint")
    mcfg, _ = load_config(args.config, args.set)
    block = model_mod.init_from_vanilla(vanilla, mcfg)
    out = _out_dir(args)
    ckpt = out / "block_init.blkt"
    model_mod.save_checkpoint(block, ckpt)
    print(f"initialized block model from {args.vanilla_ckpt} -> {ckpt}")
    return 0


def cmd_analyze(args) -> int:
    net = model_mod.load_checkpoint(args.ckpt)
    ids = tokenize(Path(args.input).read_bytes())
    rows_batch = eval_rows(ids, net.cfg)
    first = rows_batch.token_ids[:1]
    out = _out_dir(args)
    attn = bench.dump_attention(net, first, max_positions=args.max_positions)
    _write_csv(out / "attention.csv", attn)
    written = [out / "attention.csv"]
    if isinstance(net, model_mod.BlockLM):
        _write_csv(out / "attention_sink.csv", bench.attention_sink(net, first))
        written.append(out / "attention_sink.csv")
        if net.cfg.token_decoder_variant == "prefix":
            with engine.no_grad():
                embs = net.embed_blocks(first)
                ctx = net.contexts(embs)
            n = first.shape[1] // net.cfg.block_length
            probe_rows = []
            for bidx in range(min(n - 1, args.blocks)):
                ranked = bench.nearest_tokens(net, ctx.data[0, bidx], args.nearest_k)
                for slot, pairs in enumerate(ranked):
                    for rank, (tok, score) in enumerate(pairs, start=1):
                        probe_rows.append({
                            "block": bidx, "prefix_slot": slot, "rank": rank,
                            "token_id": tok,
                            "token": repr(data.detokenize([tok], net.cfg.vocab_size)),
                            "score": f"{score:.6f}",
                        })
            _write_csv(out / "nearest_tokens.csv", probe_rows)
            written.append(out / "nearest_tokens.csv")
    print("wrote " + ", ".join(str(w) for w in written))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="blocklm",
                                 description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version",
                    version=f"blocklm 0.1.0 (kernels: {backend.BACKEND})")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--seed", type=int, default=0, help="master seed")
        p.add_argument("--set", action="append", default=[], metavar="K=V",
                       help="config override, e.g. model.block_length=8")

    p = sub.add_parser("pack", help="pack a corpus into training shards")
    p.add_argument("--config", required=True)
    p.add_argument("--input", nargs="+", required=True, help="document files")
    p.add_argument("--split-docs", action="store_true",
                   help="split files into documents on the 0x1E separator byte")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=cmd_pack)

    p = sub.add_parser("train", help="train a model from a config")
    p.add_argument("--config", required=True)
    p.add_argument("--corpus", nargs="*", default=[], help="document files")
    p.add_argument("--shard", help="pre-packed shard instead of --corpus")
    p.add_argument("--split-docs", action="store_true")
    p.add_argument("--steps", type=int, help="override train.total_steps")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="loss and position-loss of a checkpoint on text")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("generate", help="generate a continuation for a prompt")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--max-new", type=int, default=64)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--greedy", action="store_true", default=True)
    g.add_argument("--temperature", type=float)
    g.add_argument("--top-k", type=int)
    common(p)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("bench", help="throughput scenarios to CSV")
    p.add_argument("--config", nargs="+", required=True)
    p.add_argument("--prompt-len", type=int)
    p.add_argument("--gen-len", type=int)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--out")
    common(p)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("cost", help="analytical cost report to CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--scenario", choices=("train", "prefill", "decode", "all"),
                   default="all")
    p.add_argument("--prompt-len", type=int, default=256)
    p.add_argument("--gen-len", type=int, default=64)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--bytes-per-elem", type=int, default=2)
    p.add_argument("--out")
    common(p)
    p.set_defaults(fn=cmd_cost)

    p = sub.add_parser("uptrain-init", help="initialize a block model from a "
                                            "vanilla checkpoint")
    p.add_argument("--vanilla-ckpt", required=True)
    p.add_argument("--config", required=True, help="block model config")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=cmd_uptrain_init)

    p = sub.add_parser("analyze", help="attention and nearest-token dumps")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--max-positions", type=int, default=64)
    p.add_argument("--nearest-k", type=int, default=3)
    p.add_argument("--blocks", type=int, default=8,
                   help="context embeddings to probe")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=cmd_analyze)
    return ap


def run(argv) -> int:
    try:
        _setup_logging()
        parser = build_parser()
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:
            return 0 if exc.code in (0, None) else 1
        return args.fn(args)
    except BlockLMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, KeyboardInterrupt) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:  # pragma: no cover - bug path
        import traceback

        traceback.print_exc()
        return 2


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
