"""Config loading, checkpoint container, and NN building blocks."""

from __future__ import annotations

import numpy as np
import pytest
import torch
from torch import nn

from mola.checkpointio import (
    file_sha256,
    load_checkpoint,
    load_module,
    module_tensors,
    save_checkpoint,
)
from mola.config import RunConfig, canonical_json, config_from_dict, config_hash, load_config
from mola.errors import CheckpointError, ConfigError
from mola.nnblocks import Transformer, init_parameters, patchify, timestep_embedding, unpatchify


class TestConfig:
    def test_defaults_valid(self):
        cfg = config_from_dict({})
        assert cfg.world.resolution == 32
        assert cfg.policy.head == "flow_match"

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="idm"):
            config_from_dict({"idm": {"no_such_knob": 3}})
        with pytest.raises(ConfigError, match="section"):
            config_from_dict({"not_a_section": {}})

    def test_type_mismatch_rejected(self):
        with pytest.raises(ConfigError):
            config_from_dict({"idm": {"steps": "many"}})
        with pytest.raises(ConfigError):
            config_from_dict({"policy": {"freeze_moidm": 1}})

    def test_int_accepted_for_float(self):
        cfg = config_from_dict({"idm": {"lr": 1}})
        assert cfg.idm.lr == 1.0 and isinstance(cfg.idm.lr, float)

    def test_cross_field_validation(self):
        with pytest.raises(ConfigError, match="step_gap"):
            config_from_dict({"idm": {"step_gap": 99}})
        with pytest.raises(ConfigError, match="fraction"):
            config_from_dict({"policy": {"fraction": 0.0}})
        with pytest.raises(ConfigError, match="head"):
            config_from_dict({"policy": {"head": "diffusion"}})
        with pytest.raises(ConfigError, match="patch"):
            config_from_dict({"world": {"resolution": 36}, "idm": {"patch": 5}})

    def test_toml_round_trip(self, tmp_path):
        p = tmp_path / "run.toml"
        p.write_text('[idm]\nsteps = 77\n[policy]\nmodalities = ["depth"]\n')
        cfg = load_config(p)
        assert cfg.idm.steps == 77
        assert cfg.policy.modalities == ("depth",)

    def test_empty_config_is_default(self, tmp_path):
        p = tmp_path / "empty.toml"
        p.write_text("")
        assert load_config(p) == RunConfig()
        assert load_config(None) == RunConfig()

    def test_hash_stable_and_sensitive(self):
        a = config_from_dict({})
        b = config_from_dict({"idm": {"steps": 10000}})  # explicit default
        c = config_from_dict({"idm": {"steps": 10001}})
        assert config_hash(a) == config_hash(b)
        assert config_hash(a) != config_hash(c)
        assert canonical_json(a) == canonical_json(b)

    def test_deterministic_env_override(self, monkeypatch):
        monkeypatch.setenv("MOLA_DETERMINISTIC", "1")
        cfg = config_from_dict({"deterministic": False})
        assert cfg.deterministic is True


class TestCheckpoint:
    def _module(self, seed=0):
        torch.manual_seed(seed)
        m = nn.Sequential(nn.Linear(4, 8), nn.LayerNorm(8), nn.Linear(8, 2))
        return m

    def test_round_trip_exact(self, tmp_path):
        m = self._module()
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, module_tensors(m, "net."), config={"dim": 4}, meta={"stage": "test"})
        ck = load_checkpoint(path)
        assert ck.config == {"dim": 4}
        assert ck.meta["stage"] == "test"
        fresh = self._module(seed=1)
        load_module(fresh, ck, "net.")
        for a, b in zip(m.parameters(), fresh.parameters()):
            assert torch.equal(a, b)

    def test_byte_determinism(self, tmp_path):
        m = self._module()
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        h1 = save_checkpoint(p1, module_tensors(m, "net."), config={}, meta={})
        h2 = save_checkpoint(p2, module_tensors(m, "net."), config={}, meta={})
        assert h1 == h2
        assert p1.read_bytes() == p2.read_bytes()
        assert file_sha256(p1) == h1

    def test_corruption_detected(self, tmp_path):
        m = self._module()
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, module_tensors(m, "net."), config={}, meta={})
        good = path.read_bytes()
        raw = bytearray(good)
        raw[:4] = b"JUNK"
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
        path.write_bytes(good[: len(good) // 2])  # truncation
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_missing_tensor_rejected(self, tmp_path):
        m = self._module()
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, module_tensors(m, "net."), config={}, meta={})
        ck = load_checkpoint(path)
        bigger = nn.Sequential(nn.Linear(4, 8), nn.LayerNorm(8), nn.Linear(8, 3))
        with pytest.raises(CheckpointError):
            load_module(bigger, ck, "net.")
        with pytest.raises(CheckpointError):
            load_module(self._module(), ck, "wrong_prefix.")


class TestBlocks:
    def test_init_deterministic(self):
        def build():
            m = Transformer(16, 2, 4)
            return init_parameters(m, torch.Generator().manual_seed(9))

        a, b = build(), build()
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)
        c = init_parameters(Transformer(16, 2, 4), torch.Generator().manual_seed(10))
        assert any(not torch.equal(pa, pc) for pa, pc in zip(a.parameters(), c.parameters()))

    def test_init_covers_everything(self):
        m = Transformer(16, 2, 4)
        # deliberately poison parameters so missed ones would be caught
        with torch.no_grad():
            for p in m.parameters():
                p.fill_(float("nan"))
        init_parameters(m, torch.Generator().manual_seed(0))
        for name, p in m.named_parameters():
            assert torch.isfinite(p).all(), name

    def test_patchify_inverse(self):
        x = torch.arange(2 * 3 * 8 * 8, dtype=torch.float32).reshape(2, 3, 8, 8)
        for p in (2, 4, 8):
            tokens = patchify(x, p)
            assert tokens.shape == (2, (8 // p) ** 2, p * p * 3)
            assert torch.equal(unpatchify(tokens, p, 3, 8, 8), x)
        with pytest.raises(ValueError):
            patchify(x, 3)

    def test_patchify_row_major(self):
        x = torch.zeros(1, 1, 4, 4)
        x[0, 0, 0, 2] = 7.0  # second patch along the top row, p=2
        tokens = patchify(x, 2)
        assert tokens[0, 1].abs().sum() == 7.0
        assert tokens[0, 0].abs().sum() == 0.0

    def test_timestep_embedding(self):
        t = torch.tensor([0.0, 0.5, 1.0], dtype=torch.float64)
        emb = timestep_embedding(t, 32)
        assert emb.shape == (3, 32)
        assert not torch.allclose(emb[0], emb[1])
        assert torch.allclose(emb[:, 0], torch.cos(t * 1000.0))

    def test_attention_capture_and_mask(self):
        m = init_parameters(Transformer(16, 2, 4), torch.Generator().manual_seed(3))
        x = torch.randn(2, 5, 16, generator=torch.Generator().manual_seed(4))
        cap: list = []
        m(x, capture=cap)
        assert len(cap) == 2 and cap[0].shape == (2, 4, 5, 5)
        assert torch.allclose(cap[0].sum(-1), torch.ones(2, 4, 5))
        causal = torch.ones(5, 5, dtype=torch.bool).tril()
        cap2: list = []
        m(x, capture=cap2, mask=causal)
        assert torch.all(cap2[0].triu(1) == 0)
