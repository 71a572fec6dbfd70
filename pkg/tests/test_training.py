"""Augmentation, training loops, cache behavior, evaluation."""

import numpy as np
import pytest
from dataclasses import replace

import ksparse.attention as attn
import ksparse.model as mdl
import ksparse.training as tr
from ksparse.config import parse_config
from ksparse.errors import ConfigError, DomainError
from ksparse.synthdata import SynthSpec, generate


def _rng(seed=0):
    return np.random.Generator(np.random.PCG64(seed))


def _tiny_cfg(text=""):
    base = ("height = 32\nwidth = 32\nd = 8\nn_blocks = 1\nmlp_hidden = 8\n"
            "saliency_hidden = 16,8\nd_z = 4\nbatch = 4\nsteps = 4\nlog_every = 1000\n")
    return parse_config(base + text)


def _tiny_data(n=12, seed=9):
    return generate(SynthSpec(n_images=n, height=32, width=32, seed=seed,
                              radius_range=(1.0, 1.5), max_footprint=4,
                              background_amp=0.05))


class TestAugmentation:
    def test_disabled_augmentations_identity(self):
        spec = tr.AugmentSpec(flip_prob=0.0, noise_std=0.0, jitter=0.0,
                              crop_min=1.0, crop_max=1.0)
        img = _rng(1).random((16, 16, 1), dtype=np.float32)
        x1, x2 = tr.make_views(img, spec, (spec.view_rng(0, 0, 0, 0), spec.view_rng(0, 0, 1, 0)))
        np.testing.assert_array_equal(x1, img)
        np.testing.assert_array_equal(x2, img)

    def test_same_seed_bit_identical(self):
        spec = tr.AugmentSpec()
        img = _rng(2).random((32, 32, 1), dtype=np.float32)
        v1 = tr.augment(img, spec, spec.view_rng(7, 3, 0, 11))
        v2 = tr.augment(img, spec, spec.view_rng(7, 3, 0, 11))
        np.testing.assert_array_equal(v1, v2)
        v3 = tr.augment(img, spec, spec.view_rng(7, 3, 1, 11))
        assert not np.array_equal(v1, v3)

    def test_noise_mean_matches_half_normal(self):
        """E|N(0, s)| = s * sqrt(2/pi); measured over many draws within 5%."""
        spec = tr.AugmentSpec(flip_prob=0.0, noise_std=0.1, jitter=0.0,
                              crop_min=1.0, crop_max=1.0)
        img = np.full((64, 64, 1), 0.5, dtype=np.float32)
        diffs = []
        for i in range(50):
            v = tr.augment(img, spec, spec.view_rng(0, i, 0, 0))
            diffs.append(np.abs(v - img).mean())
        expected = 0.1 * np.sqrt(2 / np.pi)
        assert abs(np.mean(diffs) - expected) / expected < 0.05

    def test_crop_preserves_geometry(self):
        spec = tr.AugmentSpec(flip_prob=0.0, noise_std=0.0, jitter=0.0,
                              crop_min=0.5, crop_max=0.9, patch=8)
        img = _rng(3).random((32, 32, 1), dtype=np.float32)
        v = tr.augment(img, spec, spec.view_rng(0, 0, 0, 0))
        assert v.shape == img.shape

    def test_views_clamped(self):
        spec = tr.AugmentSpec(flip_prob=0.0, noise_std=0.5, jitter=0.0,
                              crop_min=1.0, crop_max=1.0)
        img = np.full((16, 16, 1), 0.9, dtype=np.float32)
        v = tr.augment(img, spec, spec.view_rng(0, 0, 0, 0))
        assert v.max() <= 1.0 and v.min() >= 0.0


class TestPretrainStep:
    def test_inactive_group_bit_identical(self):
        cfg = _tiny_cfg("alt_period = 1")
        data = _tiny_data()
        rng = _rng(4)
        params = mdl.init_params(cfg.arch(), rng, dtype=cfg.dtype)
        opts = tr.make_optimizers(params, cfg)
        sal_before = {k: p.data.copy() for k, p in params.saliency_group().items()}
        bb_before = {k: p.data.copy() for k, p in params.backbone_group().items()}
        # step 0 is a saliency turn: backbone must be untouched bit-for-bit
        tr.pretrain_step(data[:4], np.arange(4), params, opts, cfg, step=0)
        for k, v in bb_before.items():
            np.testing.assert_array_equal(params[k].data, v)
        assert any(not np.array_equal(params[k].data, v) for k, v in sal_before.items())
        # step 1 is a backbone turn: saliency must be untouched
        sal_mid = {k: p.data.copy() for k, p in params.saliency_group().items()}
        tr.pretrain_step(data[:4], np.arange(4), params, opts, cfg, step=1)
        for k, v in sal_mid.items():
            np.testing.assert_array_equal(params[k].data, v)

    def test_no_saliency_path_without_bias_or_lambda(self):
        """bias none + lambda 0: saliency gradients are exactly zero."""
        cfg = _tiny_cfg("alt_period = 0\nbias_mode = none\nlambda = 0.0\nweight_decay = 0.0")
        data = _tiny_data()
        params = mdl.init_params(cfg.arch(), _rng(5), dtype=cfg.dtype)
        before = {k: p.data.copy() for k, p in params.saliency_group().items()}
        opts = tr.make_optimizers(params, cfg)
        tr.pretrain_step(data[:4], np.arange(4), params, opts, cfg, step=0)
        for k, p in params.saliency_group().items():
            assert p.grad is None, k
            np.testing.assert_array_equal(p.data, before[k])

    def test_saliency_path_with_bias(self):
        cfg = _tiny_cfg("alt_period = 0\nbias_mode = saliency\nlambda = 0.0")
        data = _tiny_data()
        params = mdl.init_params(cfg.arch(), _rng(6), dtype=cfg.dtype)
        opts = tr.make_optimizers(params, cfg)
        tr.pretrain_step(data[:4], np.arange(4), params, opts, cfg, step=0)
        grads = [p.grad for p in params.saliency_group().values()]
        assert any(g is not None and np.any(g != 0) for g in grads)

    def test_metrics_row_fields(self):
        cfg = _tiny_cfg()
        data = _tiny_data()
        params = mdl.init_params(cfg.arch(), _rng(7), dtype=cfg.dtype)
        opts = tr.make_optimizers(params, cfg)
        row = tr.pretrain_step(data[:4], np.arange(4), params, opts, cfg, step=0)
        assert set(row) >= {"step", "l_contrast", "l_sparse_soft", "l_sparse_hard",
                            "l_total", "attn_madds"}
        assert np.isfinite(row["l_total"]) and row["attn_madds"] > 0


class TestDeterminism:
    def test_identical_runs_bit_identical(self):
        cfg = _tiny_cfg()
        data = _tiny_data()
        r1 = tr.run_pretraining(data, cfg)
        r2 = tr.run_pretraining(data, cfg)
        for k in r1.params.tensors:
            np.testing.assert_array_equal(r1.params[k].data, r2.params[k].data)
        assert r1.metrics == r2.metrics

    def test_seed_changes_trajectory(self):
        data = _tiny_data()
        r1 = tr.run_pretraining(data, _tiny_cfg())
        r2 = tr.run_pretraining(data, replace(_tiny_cfg(), seed=1))
        assert any(not np.array_equal(r1.params[k].data, r2.params[k].data)
                   for k in r1.params.tensors)


class TestCache:
    def test_snapshot_matches_fresh_compute(self):
        cfg = _tiny_cfg()
        data = _tiny_data()
        params = mdl.init_params(cfg.arch(), _rng(8), dtype=cfg.dtype)
        cache = tr.snapshot_cache(data, params, cfg)
        assert len(cache.entries) == len(data)
        s_hat, K, S = tr._clean_saliency(data, [3], params, cfg)
        np.testing.assert_array_equal(cache.entries[3][0], S[0])
        np.testing.assert_allclose(cache.entries[3][1], s_hat[0], atol=1e-7)

    def test_snapshot_deterministic(self):
        cfg = _tiny_cfg()
        data = _tiny_data()
        params = mdl.init_params(cfg.arch(), _rng(9), dtype=cfg.dtype)
        c1 = tr.snapshot_cache(data, params, cfg)
        c2 = tr.snapshot_cache(data, params, cfg)
        for i in c1.entries:
            np.testing.assert_array_equal(c1.entries[i][0], c2.entries[i][0])
            np.testing.assert_array_equal(c1.entries[i][1], c2.entries[i][1])

    def test_missing_entry_raises(self):
        cache = tr.AttnCache(K=2, L=4, rho=0.5)
        with pytest.raises(ConfigError, match="no entry"):
            cache.get(7)


class TestFinetune:
    def _setup(self, cfg_text=""):
        cfg = replace(_tiny_cfg(cfg_text), steps=2)
        data = _tiny_data()
        pre = tr.run_pretraining(data, cfg)
        return cfg, data, pre

    def test_saliency_frozen_and_never_called_with_cache(self):
        cfg, data, pre = self._setup("reuse_cache = true")
        labels = np.array([s.label for s in data])
        sal_before = {k: p.data.copy() for k, p in pre.params.saliency_group().items()}
        mdl.reset_saliency_calls()
        tr.run_finetune(data, pre.params, cfg, pre.cache, steps=3)
        assert mdl.saliency_call_count() == 0
        for k, v in sal_before.items():
            np.testing.assert_array_equal(pre.params[k].data, v)

    def test_recompute_mode_calls_saliency_but_keeps_it_frozen(self):
        cfg, data, pre = self._setup("reuse_cache = false")
        sal_before = {k: p.data.copy() for k, p in pre.params.saliency_group().items()}
        mdl.reset_saliency_calls()
        tr.run_finetune(data, pre.params, cfg, None, steps=2)
        assert mdl.saliency_call_count() > 0
        for k, v in sal_before.items():
            np.testing.assert_array_equal(pre.params[k].data, v)

    def test_missing_cache_entry_errors(self):
        cfg, data, pre = self._setup("reuse_cache = true")
        sparse_cache = tr.AttnCache(K=pre.cache.K, L=pre.cache.L, rho=cfg.rho)
        with pytest.raises(ConfigError, match="no entry"):
            opt = tr.make_optimizers(pre.params, cfg)["backbone"]
            tr.finetune_step(data[:2], [0, 1], np.array([0, 1]), sparse_cache,
                             pre.params, opt, cfg)

    def test_cache_required_when_reusing(self):
        cfg, data, pre = self._setup("reuse_cache = true")
        with pytest.raises(ConfigError, match="requires an attention cache"):
            opt = tr.make_optimizers(pre.params, cfg)["backbone"]
            tr.finetune_step(data[:2], [0, 1], np.array([0, 1]), None,
                             pre.params, opt, cfg)


class TestEvaluate:
    def test_auc_perfect_separation(self):
        assert tr.auc_score(np.array([0.9, 0.8, 0.1, 0.2]), np.array([1, 1, 0, 0])) == 1.0

    def test_auc_all_ties_is_half(self):
        assert tr.auc_score(np.full(6, 0.5), np.array([1, 0, 1, 0, 1, 0])) == 0.5

    def test_auc_brute_force_pairs(self):
        """pos=[0.9, 0.4], neg=[0.5, 0.1]: 3 winning pairs of 4."""
        scores = np.array([0.9, 0.4, 0.5, 0.1])
        labels = np.array([1, 1, 0, 0])
        wins = 0.0
        for p in scores[labels == 1]:
            for n in scores[labels == 0]:
                wins += 1.0 if p > n else (0.5 if p == n else 0.0)
        oracle = wins / 4
        assert oracle == 0.75
        assert tr.auc_score(scores, labels) == oracle

    def test_auc_midranks_match_pair_counting(self):
        rng = _rng(10)
        scores = np.round(rng.random(60), 1)  # coarse grid forces ties
        labels = (rng.random(60) < 0.5).astype(int)
        if labels.sum() in (0, 60):
            labels[0] = 1 - labels[0]
        wins = 0.0
        for p in scores[labels == 1]:
            for n in scores[labels == 0]:
                wins += 1.0 if p > n else (0.5 if p == n else 0.0)
        oracle = wins / (labels.sum() * (60 - labels.sum()))
        np.testing.assert_allclose(tr.auc_score(scores, labels), oracle, rtol=1e-12)

    def test_single_class_rejected(self):
        with pytest.raises(DomainError, match="AUC undefined"):
            tr.auc_score(np.array([0.1, 0.2]), np.array([1, 1]))

    def test_evaluate_returns_sane_metrics(self):
        cfg = _tiny_cfg()
        data = _tiny_data()
        params = mdl.init_params(cfg.arch(), _rng(11), dtype=cfg.dtype)
        cache = tr.snapshot_cache(data, params, cfg)
        out = tr.evaluate(data, params, cfg, cache=cache)
        assert 0.0 <= out["accuracy"] <= 1.0 and 0.0 <= out["auc"] <= 1.0


class TestStaticMode:
    def test_static_selection_fixed_across_steps(self):
        cfg = replace(_tiny_cfg("static_sparse = true"), steps=3)
        data = _tiny_data()
        result = tr.run_pretraining(data, cfg)
        assert result.metrics  # runs end to end


class TestTrainingOracle:
    def test_hundred_finetune_steps_fit_the_train_set(self):
        """100 supervised steps reach >= 95% accuracy on the labeled set."""
        cfg = replace(_tiny_cfg(), batch=8, steps=100)
        data = generate(SynthSpec(n_images=32, height=32, width=32, seed=9,
                                  radius_range=(1.0, 1.5), max_footprint=4,
                                  background_amp=0.03, noise_std=0.01))
        pre = tr.run_pretraining(data, cfg)
        tr.run_finetune(data, pre.params, cfg, pre.cache, steps=100)
        scores = tr.evaluate(data, pre.params, cfg, cache=pre.cache)
        assert scores["accuracy"] >= 0.95, scores
