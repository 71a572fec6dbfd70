"""Config parsing, checkpoint and cache persistence."""

import numpy as np
import pytest

import ksparse.checkpoint as ck
import ksparse.model as mdl
import ksparse.training as tr
from ksparse.autodiff import AdamW
from ksparse.config import RunConfig, parse_config
from ksparse.errors import ConfigError, FileFormatError
from ksparse.synthdata import SynthSpec, generate


def _rng(seed=0):
    return np.random.Generator(np.random.PCG64(seed))


class TestParseConfig:
    def test_empty_gives_defaults(self):
        cfg = parse_config("")
        assert cfg == RunConfig()
        assert cfg.rho == 0.3 and cfg.lr == 3e-4 and cfg.batch == 32
        assert cfg.saliency_hidden == (512, 256)

    def test_comments_and_blanks_ignored(self):
        cfg = parse_config("# top comment\n\nrho = 0.5  # inline\n")
        assert cfg.rho == 0.5

    def test_rho_bound_error_names_interval(self):
        with pytest.raises(ConfigError, match=r"rho must be in \(0, 1\]"):
            parse_config("rho = 1.5")

    def test_default_rho_gives_k19_at_default_geometry(self):
        from ksparse.attention import select_topk
        cfg = parse_config("rho = 0.3")
        assert cfg.n_patches == 64
        K, _ = select_topk(np.arange(64) / 64.0, cfg.rho)
        assert K == 19

    def test_unknown_key_with_line_number(self):
        with pytest.raises(ConfigError, match="line 2: unknown key 'bogus'"):
            parse_config("rho = 0.5\nbogus = 1")

    def test_bad_value_with_line_number(self):
        with pytest.raises(ConfigError, match="line 1: bad value for 'steps'"):
            parse_config("steps = many")

    def test_duplicate_key_rejected(self):
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config("rho = 0.5\nrho = 0.4")

    def test_theta_auto(self):
        cfg = parse_config("theta = auto")
        assert cfg.theta is None
        assert cfg.theta_value() == 1.0 / 64
        assert parse_config("theta = 0.02").theta == 0.02

    def test_env_seed_override(self):
        cfg = parse_config("rho = 0.5", env={"SC_SEED": "17"})
        assert cfg.seed == 17

    def test_env_and_config_seed_conflict(self):
        with pytest.raises(ConfigError, match="SC_SEED"):
            parse_config("seed = 3", env={"SC_SEED": "17"})

    def test_env_seed_must_be_int(self):
        with pytest.raises(ConfigError, match="integer"):
            parse_config("", env={"SC_SEED": "abc"})

    def test_canonical_text_round_trip(self):
        cfg = parse_config("rho = 0.25\ntau = 0.07\nsteps = 11\ntheta = auto")
        again = parse_config(cfg.to_text())
        assert again == cfg
        assert again.to_text() == cfg.to_text()

    def test_validation_bounds(self):
        for bad in ("tau = 0", "t_ind = -1", "lr = 0", "lambda = -0.5",
                    "bias_mode = magic", "precision = half", "alt_period = -1",
                    "crop_min = 0.9\ncrop_max = 0.8"):
            with pytest.raises(ConfigError):
                parse_config(bad)


def _toy_cfg():
    return parse_config("height = 32\nwidth = 32\nd = 8\nn_blocks = 1\nmlp_hidden = 8\n"
                        "saliency_hidden = 16,8\nd_z = 4\nbatch = 4\nsteps = 2")


class TestCheckpoint:
    def test_round_trip_values_and_bytes(self, tmp_path):
        cfg = _toy_cfg()
        params = mdl.init_params(cfg.arch(), _rng(1), dtype=cfg.dtype)
        p1, p2 = tmp_path / "a.sckp", tmp_path / "b.sckp"
        ck.save_checkpoint(str(p1), params, cfg)
        loaded, loaded_cfg, opt = ck.load_checkpoint(str(p1))
        assert opt is None and loaded_cfg == cfg
        for k in params.tensors:
            np.testing.assert_array_equal(loaded[k].data, params[k].data)
        ck.save_checkpoint(str(p2), loaded, loaded_cfg)
        assert p1.read_bytes() == p2.read_bytes()

    def test_optimizer_state_round_trip(self, tmp_path):
        cfg = _toy_cfg()
        params = mdl.init_params(cfg.arch(), _rng(2), dtype=cfg.dtype)
        opt = AdamW(params.tensors, lr=0.01)
        for p in params.tensors.values():
            p.grad = np.ones_like(p.data)
        opt.step()
        p1, p2 = tmp_path / "a.sckp", tmp_path / "b.sckp"
        ck.save_checkpoint(str(p1), params, cfg, opt=opt)
        loaded, loaded_cfg, state = ck.load_checkpoint(str(p1))
        assert state["t"] == 1
        np.testing.assert_allclose(state["m"]["cls.weight"],
                                   opt.m["cls.weight"].astype(np.float32))
        restored = AdamW(loaded.tensors, lr=0.01)
        restored.t = state["t"]
        restored.m.update(state["m"])
        restored.v.update(state["v"])
        ck.save_checkpoint(str(p2), loaded, loaded_cfg, opt=restored)
        assert p1.read_bytes() == p2.read_bytes()

    def test_shape_validation_against_architecture(self, tmp_path):
        cfg = _toy_cfg()
        params = mdl.init_params(cfg.arch(), _rng(3), dtype=cfg.dtype)
        path = tmp_path / "a.sckp"
        ck.save_checkpoint(str(path), params, cfg)
        raw = bytearray(path.read_bytes())
        # corrupt the stored config's embedding dim so shapes disagree
        text = raw.decode("latin-1")
        idx = text.index("d = 8")
        raw[idx:idx + 5] = b"d = 9"
        path.write_bytes(bytes(raw))
        with pytest.raises((FileFormatError, ConfigError)):
            ck.load_checkpoint(str(path))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.sckp"
        path.write_bytes(b"WHAT" + b"\x00" * 40)
        with pytest.raises(FileFormatError, match="bad magic"):
            ck.load_checkpoint(str(path))

    def test_truncation(self, tmp_path):
        cfg = _toy_cfg()
        params = mdl.init_params(cfg.arch(), _rng(4), dtype=cfg.dtype)
        path = tmp_path / "a.sckp"
        ck.save_checkpoint(str(path), params, cfg)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(FileFormatError, match="truncated"):
            ck.load_checkpoint(str(path))


class TestCacheFile:
    def test_round_trip(self, tmp_path):
        cfg = _toy_cfg()
        data = generate(SynthSpec(n_images=6, height=32, width=32, seed=3,
                                  radius_range=(1.0, 1.5), max_footprint=4))
        params = mdl.init_params(cfg.arch(), _rng(5), dtype=cfg.dtype)
        cache = tr.snapshot_cache(data, params, cfg)
        p1, p2 = tmp_path / "a.scac", tmp_path / "b.scac"
        ck.save_cache(str(p1), cache)
        loaded = ck.load_cache(str(p1))
        assert loaded.K == cache.K and loaded.L == cache.L
        for i in cache.entries:
            np.testing.assert_array_equal(loaded.entries[i][0], cache.entries[i][0])
            np.testing.assert_array_equal(loaded.entries[i][1],
                                          cache.entries[i][1].astype(np.float32))
        ck.save_cache(str(p2), loaded)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.scac"
        path.write_bytes(b"SCKP" + b"\x00" * 20)
        with pytest.raises(FileFormatError, match="bad magic"):
            ck.load_cache(str(path))

    def test_inconsistent_k_rejected(self, tmp_path):
        cfg = _toy_cfg()
        data = generate(SynthSpec(n_images=4, height=32, width=32, seed=3,
                                  radius_range=(1.0, 1.5), max_footprint=4))
        params = mdl.init_params(cfg.arch(), _rng(6), dtype=cfg.dtype)
        cache = tr.snapshot_cache(data, params, cfg)
        path = tmp_path / "a.scac"
        ck.save_cache(str(path), cache)
        raw = bytearray(path.read_bytes())
        raw[18 + 4] = 99  # entry 0's k field (after magic+version+header, id u32)
        path.write_bytes(bytes(raw))
        with pytest.raises(FileFormatError):
            ck.load_cache(str(path))
