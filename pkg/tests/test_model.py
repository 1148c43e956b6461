"""Model synthesis, presets, serialization, and the reference forward pass."""

from __future__ import annotations

import numpy as np
import pytest

from kvfactor.densemat import Matrix, condition_number, svd
from kvfactor.errors import ContainerFormatError, ContractViolationError
from kvfactor.model import (
    LARGE_PRESETS,
    PRESETS,
    ModelConfig,
    SpectrumSpec,
    forward_logits,
    generate_synthetic,
    load_model,
    preset_config,
    save_model,
)
from kvfactor.prng import Prng
from kvfactor.model import matrix_with_spectrum

TOY = preset_config("toy-small")
TOY_SPEC = SpectrumSpec(sigma_max=1.0, decay=0.9)


@pytest.fixture(scope="module")
def toy_model():
    return generate_synthetic(TOY, TOY_SPEC, seed=11)


class TestConfig:
    def test_presets_exist(self):
        assert set(PRESETS) == {
            "llama2-13b", "llama3-8b", "llama3-70b", "toy-small", "toy-deep"
        }

    def test_published_architecture_numbers(self):
        c = preset_config("llama3-8b")
        assert (c.num_layers, c.num_heads, c.num_kv_heads, c.head_dim) == (32, 32, 8, 128)
        assert c.model_dim == 4096
        c = preset_config("llama2-13b")
        assert (c.num_layers, c.num_heads, c.num_kv_heads, c.head_dim) == (40, 40, 40, 128)
        assert c.model_dim == 5120
        c = preset_config("llama3-70b")
        assert (c.num_layers, c.num_heads, c.num_kv_heads, c.head_dim) == (80, 64, 8, 128)
        assert c.model_dim == 8192

    def test_large_preset_flagging(self):
        assert LARGE_PRESETS == {"llama2-13b", "llama3-8b", "llama3-70b"}

    def test_dimension_validation(self):
        with pytest.raises(ContractViolationError):
            ModelConfig(num_layers=2, num_heads=4, num_kv_heads=2, head_dim=16,
                        model_dim=100, vocab_size=16, mlp_hidden=32)
        with pytest.raises(ContractViolationError):
            ModelConfig(num_layers=2, num_heads=4, num_kv_heads=3, head_dim=16,
                        model_dim=64, vocab_size=16, mlp_hidden=32)

    def test_group_map(self):
        c = preset_config("llama3-8b")
        assert [c.kv_head_of(j) for j in (0, 3, 4, 31)] == [0, 0, 1, 7]
        mha = preset_config("llama2-13b")
        assert all(mha.kv_head_of(j) == j for j in range(0, 40, 7))

    def test_unknown_preset(self):
        with pytest.raises(ContractViolationError):
            preset_config("toy-giant")


class TestSpectrumRealization:
    def test_prescribed_sigmas_are_realized(self):
        rng = Prng(3)
        sig = 2.0 * 0.8 ** np.arange(12)
        m = matrix_with_spectrum(rng, 20, 12, sig)
        got = svd(m).sigma
        assert np.abs(got - sig).max() / sig[0] < 1e-8

    def test_orthogonal_spectrum_gives_condition_one(self):
        w = generate_synthetic(TOY, SpectrumSpec(sigma_max=1.0, decay=1.0), seed=0)
        assert condition_number(w.layers[0].w_k) == pytest.approx(1.0, abs=1e-9)

    def test_geometric_decay_condition(self):
        w = generate_synthetic(TOY, SpectrumSpec(sigma_max=1.0, decay=0.5), seed=0)
        # kv width 32: condition = 0.5 ** -(31)
        assert condition_number(w.layers[0].w_k) == pytest.approx(2.0 ** 31, rel=1e-6)

    def test_per_layer_decay_override(self):
        decays = tuple(np.linspace(0.6, 0.95, TOY.num_layers))
        w = generate_synthetic(
            TOY, SpectrumSpec(sigma_max=1.0, decay=0.9, per_layer_decay=decays), seed=1
        )
        c0 = condition_number(w.layers[0].w_k)
        cl = condition_number(w.layers[-1].w_k)
        assert c0 == pytest.approx(0.6 ** -31, rel=1e-6)
        assert cl == pytest.approx(0.95 ** -31, rel=1e-6)

    def test_per_layer_decay_length_checked(self):
        with pytest.raises(ContractViolationError):
            generate_synthetic(TOY, SpectrumSpec(per_layer_decay=(0.5, 0.5)), seed=0)

    def test_determinism(self):
        a = generate_synthetic(TOY, TOY_SPEC, seed=11)
        b = generate_synthetic(TOY, TOY_SPEC, seed=11)
        assert np.array_equal(a.embedding.data, b.embedding.data)
        for la, lb in zip(a.layers, b.layers):
            assert np.array_equal(la.w_k.data, lb.w_k.data)
        c = generate_synthetic(TOY, TOY_SPEC, seed=12)
        assert not np.array_equal(a.embedding.data, c.embedding.data)


class TestForwardLogits:
    def test_shape(self, toy_model):
        out = forward_logits(toy_model, [1, 2, 3])
        assert (out.rows, out.cols) == (3, TOY.vocab_size)
        assert np.all(np.isfinite(out.data))

    def test_causality(self, toy_model):
        ids = [5, 9, 200, 31, 7]
        full = forward_logits(toy_model, ids).data
        prefix = forward_logits(toy_model, ids[:3]).data
        assert np.abs(full[:3] - prefix).max() < 1e-12

    def test_id_validation(self, toy_model):
        with pytest.raises(ContractViolationError):
            forward_logits(toy_model, [])
        with pytest.raises(ContractViolationError):
            forward_logits(toy_model, [256])
        with pytest.raises(ContractViolationError):
            forward_logits(toy_model, list(range(TOY.max_seq_len + 1)))

    def test_rope_changes_output(self, toy_model):
        no_rope_cfg = ModelConfig(**{
            **{f: getattr(TOY, f) for f in (
                "num_layers", "num_heads", "num_kv_heads", "head_dim", "model_dim",
                "vocab_size", "mlp_hidden", "rope_base", "max_seq_len")},
            "rope_enabled": False,
        })
        w2 = generate_synthetic(no_rope_cfg, TOY_SPEC, seed=11)
        a = forward_logits(toy_model, [1, 2, 3]).data
        b = forward_logits(w2, [1, 2, 3]).data
        # same weights (same seed and shapes), different positional treatment
        assert np.abs(a - b).max() > 1e-6


class TestSerialization:
    def test_round_trip(self, toy_model, tmp_path):
        d = str(tmp_path / "m")
        save_model(toy_model, d)
        loaded = load_model(d)
        assert loaded.config == toy_model.config
        assert np.array_equal(loaded.embedding.data, toy_model.embedding.data)
        for la, lb in zip(loaded.layers, toy_model.layers):
            assert np.array_equal(la.w_q.data, lb.w_q.data)
            assert np.array_equal(la.mlp_down.data, lb.mlp_down.data)
            assert np.array_equal(la.attn_norm, lb.attn_norm)
        assert np.array_equal(loaded.lm_head.data, toy_model.lm_head.data)

    def test_round_trip_preserves_logits(self, toy_model, tmp_path):
        d = str(tmp_path / "m")
        save_model(toy_model, d)
        loaded = load_model(d)
        a = forward_logits(toy_model, [4, 8, 15]).data
        b = forward_logits(loaded, [4, 8, 15]).data
        assert np.array_equal(a, b)

    def test_missing_tensor_named(self, toy_model, tmp_path):
        import json
        import os
        d = str(tmp_path / "m")
        save_model(toy_model, d)
        cfg_path = os.path.join(d, "config.json")
        with open(cfg_path) as f:
            cfg = json.load(f)
        cfg["tensors"] = [t for t in cfg["tensors"] if t["name"] != "layers.2.w_v"]
        with open(cfg_path, "w") as f:
            json.dump(cfg, f)
        with pytest.raises(ContainerFormatError, match="layers.2.w_v"):
            load_model(d)

    def test_extra_tensor_rejected(self, toy_model, tmp_path):
        import json
        import os
        d = str(tmp_path / "m")
        save_model(toy_model, d)
        cfg_path = os.path.join(d, "config.json")
        with open(cfg_path) as f:
            cfg = json.load(f)
        # alias an existing tensor's bytes under a bogus name
        first = dict(cfg["tensors"][0])
        first["name"] = "mystery"
        cfg["tensors"].append(first)
        with open(cfg_path, "w") as f:
            json.dump(cfg, f)
        with pytest.raises(ContainerFormatError, match="mystery"):
            load_model(d)
