"""Config validation, persistence, and parameter counting."""

import numpy as np
import pytest

from blocklm.config import (ModelConfig, TrainConfig, block_config, load_config,
                            param_count, save_config, validate_model, vanilla_config)
from blocklm.errors import ConfigError
from blocklm.model import build_model


def test_reference_block_row_valid():
    # the published 302M-class block shape: L_B=4, 512 block positions,
    # 12+12 layers at dim 1024, 16 heads, prefix 2+4
    cfg = block_config(vocab_size=50304, context_length=2048, block_length=4,
                       prefix_length=2, model_dim=1024, n_layers_block=12,
                       n_layers_token=12, n_heads=16)
    assert validate_model(cfg) == []
    assert cfg.n_blocks == 512
    assert cfg.local_len() == 6


def test_block_length_zero_message(tmp_path):
    save_config(tmp_path / "c.json", ModelConfig(), TrainConfig())
    with pytest.raises(ConfigError, match="block_length must be ≥ 1"):
        load_config(tmp_path / "c.json", overrides=["model.block_length=0"])


def test_dim_divisibility_error(tmp_path):
    save_config(tmp_path / "c.json", ModelConfig(), TrainConfig())
    with pytest.raises(ConfigError, match="divisible by block_length"):
        load_config(tmp_path / "c.json",
                    overrides=["model.model_dim=1022", "model.n_heads=2"])


def test_all_violations_reported():
    cfg = ModelConfig(block_length=0, vocab_size=1, n_heads=3)
    problems = validate_model(cfg)
    assert len(problems) >= 3


def test_unknown_field(tmp_path):
    (tmp_path / "c.json").write_text('{"model": {"vocabulary": 10}}')
    with pytest.raises(ConfigError, match="unknown field 'vocabulary'"):
        load_config(tmp_path / "c.json")


def test_vanilla_forcing():
    cfg = ModelConfig(kind="vanilla", block_length=4, prefix_length=2,
                      n_layers_block=3)
    problems = " ".join(validate_model(cfg))
    assert "forces block_length" in problems
    assert "forces prefix_length" in problems
    assert "forces n_layers_block" in problems


def test_train_config_invariants():
    from blocklm.config import validate_train

    bad = TrainConfig(total_steps=5, warmup_steps=10, batch_size=0)
    problems = " ".join(validate_train(bad))
    assert "must exceed warmup_steps" in problems
    assert "batch_size" in problems


def test_round_trip_field_for_field(tmp_path):
    mcfg = block_config(vocab_size=259, context_length=128, block_length=8,
                        prefix_length=3, model_dim=64, n_layers_block=3,
                        n_layers_token=2, n_heads=4,
                        embedder_variant="encoder", encoder_dim=32,
                        token_decoder_variant="summation")
    tcfg = TrainConfig(learning_rate=3e-4, total_steps=777, seed=9)
    save_config(tmp_path / "c.json", mcfg, tcfg)
    m2, t2 = load_config(tmp_path / "c.json")
    assert m2 == mcfg
    assert t2 == tcfg


def test_override_parsing(tmp_path):
    save_config(tmp_path / "c.json", ModelConfig(), TrainConfig())
    mcfg, tcfg = load_config(tmp_path / "c.json",
                             overrides=["model.block_length=8", "train.seed=3",
                                        "model.embedder_variant=encoder"])
    assert mcfg.block_length == 8
    assert tcfg.seed == 3
    assert mcfg.embedder_variant == "encoder"
    with pytest.raises(ConfigError, match="section"):
        load_config(tmp_path / "c.json", overrides=["oops.x=1"])


def test_param_count_reference_sizes():
    """Non-embedding counts match the published 85M and 302M shapes."""
    c85 = vanilla_config(vocab_size=50304, context_length=2048,
                         n_layers_token=12, model_dim=768, n_heads=12)
    _, n85 = param_count(c85)
    assert abs(n85 - 85e6) / 85e6 < 0.02
    c302 = vanilla_config(vocab_size=50304, context_length=2048,
                          n_layers_token=24, model_dim=1024, n_heads=16)
    _, n302 = param_count(c302)
    assert abs(n302 - 302e6) / 302e6 < 0.02


def test_param_count_closed_form():
    for layers, dim in [(4, 128), (12, 768), (24, 1024)]:
        cfg = vanilla_config(vocab_size=50304, context_length=2048,
                             n_layers_token=layers, model_dim=dim,
                             n_heads=max(4, dim // 64))
        _, non_emb = param_count(cfg)
        assert abs(non_emb - layers * 12 * dim * dim) / non_emb < 0.02


def test_param_count_zero_layers_projections_only():
    cfg = block_config(vocab_size=64, context_length=16, block_length=4,
                       prefix_length=2, model_dim=32, n_layers_block=0,
                       n_layers_token=1, n_heads=2)
    _, non_emb = param_count(cfg)
    # single token layer + both final norms + prefix projection
    d = 32
    expect = (12 * d * d + 17 * d) + 2 * d + 2 * d + (d * 2 * d + 2 * d)
    assert non_emb == expect


def test_param_count_agrees_with_model():
    """Counting formula matches the instantiated tensors exactly."""
    for variant, dec in [("lookup", "prefix"), ("encoder", "summation"),
                         ("cls", "cross_attention")]:
        cfg = ModelConfig(vocab_size=64, context_length=64, block_length=4,
                          prefix_length=2, model_dim=32, n_layers_block=2,
                          n_layers_token=2, n_heads=2, embedder_variant=variant,
                          token_decoder_variant=dec, encoder_dim=16,
                          encoder_layers=2, encoder_heads=2)
        model = build_model(cfg, seed=0)
        total, _ = param_count(cfg)
        actual = sum(p.data.size for p in model.params().values())
        assert actual == total, (variant, dec, actual, total)
    vcfg = vanilla_config(vocab_size=64, context_length=32, model_dim=32,
                          n_layers_token=3, n_heads=2)
    total, _ = param_count(vcfg)
    assert sum(p.data.size for p in build_model(vcfg).params().values()) == total
