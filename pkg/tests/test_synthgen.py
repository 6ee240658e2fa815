"""Tests for the synthetic three-modality generator."""

import numpy as np
import pytest

from trimodal.synthgen import (
    GeneratorConfig,
    ModalityParams,
    SyntheticDataset,
    generate_dataset,
    load_dataset,
    make_identity_latents,
    make_modality_params,
    sample_instance,
    save_dataset,
    transition_transform,
)


def small_cfg(**overrides):
    base = dict(
        num_identities=10,
        instances_per_modality=5,
        latent_dim=3,
        obs_dim=6,
        noise_scale=0.05,
        mix_t=0.7,
        seed=7,
        train_fraction=0.7,
    )
    base.update(overrides)
    return GeneratorConfig(**base)


class TestConfigValidation:
    def test_train_fraction_out_of_range(self):
        with pytest.raises(ValueError, match="train_fraction"):
            small_cfg(train_fraction=1.5)

    def test_obs_dim_smaller_than_latent(self):
        with pytest.raises(ValueError, match="obs_dim"):
            small_cfg(obs_dim=2, latent_dim=3)

    def test_negative_noise(self):
        with pytest.raises(ValueError, match="noise_scale"):
            small_cfg(noise_scale=-0.1)

    def test_mix_t_out_of_range(self):
        with pytest.raises(ValueError, match="mix_t"):
            small_cfg(mix_t=1.2)


class TestLatents:
    def test_deterministic_for_fixed_seed(self):
        cfg = small_cfg(seed=7)
        a = make_identity_latents(cfg)
        b = make_identity_latents(cfg)
        assert np.array_equal(a, b)

    def test_empty(self):
        cfg = small_cfg(num_identities=0)
        assert len(make_identity_latents(cfg)) == 0

    def test_seeded_stream_statistics(self):
        cfg = small_cfg(num_identities=50, latent_dim=8, obs_dim=16)
        latents = make_identity_latents(cfg)
        assert latents.shape == (50, 8)
        assert np.all(np.abs(latents.mean(axis=0)) <= 3.0 / np.sqrt(50))


class TestSampleInstance:
    def test_identity_transform_zero_noise(self):
        mp = ModalityParams(transform=np.eye(6, 3), shift=np.zeros(6))
        rng = np.random.default_rng(0)
        latent = np.array([1.0, -2.0, 0.5])
        out = sample_instance(latent, mp, 0.0, rng)
        np.testing.assert_array_equal(out[:3], latent)
        np.testing.assert_array_equal(out[3:], 0.0)

    def test_zero_latent_gives_shift(self):
        shift = np.arange(6.0)
        mp = ModalityParams(transform=np.eye(6, 3), shift=shift)
        out = sample_instance(np.zeros(3), mp, 0.0, np.random.default_rng(0))
        np.testing.assert_array_equal(out, shift)

    def test_noise_magnitude_monte_carlo(self):
        # Residual norm of an isotropic noise draw is about scale * sqrt(d).
        cfg = small_cfg()
        mp_v, _ = make_modality_params(cfg)
        rng = np.random.default_rng(42)
        latent = np.ones(cfg.latent_dim)
        clean = mp_v.transform @ latent + mp_v.shift
        norms = [
            np.linalg.norm(sample_instance(latent, mp_v, 0.1, rng) - clean) for _ in range(100)
        ]
        expected = 0.1 * np.sqrt(cfg.obs_dim)
        assert abs(np.mean(norms) - expected) < 0.5 * expected

    def test_dimension_mismatch(self):
        mp = ModalityParams(transform=np.eye(6, 3), shift=np.zeros(6))
        with pytest.raises(ValueError, match="dimension"):
            sample_instance(np.zeros(4), mp, 0.0, np.random.default_rng(0))


class TestTransitionTransform:
    def test_mix_zero_returns_input(self):
        cfg = small_cfg()
        mp_v, mp_i = make_modality_params(cfg)
        v = np.random.default_rng(1).standard_normal(cfg.obs_dim)
        np.testing.assert_array_equal(transition_transform(v, mp_v, mp_i, 0.0), v)

    def test_mix_one_reconstructs_other_view(self):
        cfg = small_cfg()
        mp_v, mp_i = make_modality_params(cfg)
        z = np.random.default_rng(2).standard_normal(cfg.latent_dim)
        v = mp_v.transform @ z + mp_v.shift
        out = transition_transform(v, mp_v, mp_i, 1.0)
        np.testing.assert_allclose(out, mp_i.transform @ z + mp_i.shift, atol=1e-10)

    def test_against_pseudoinverse_oracle(self):
        # Independent pinv route for full-column-rank: (T'T)^-1 T'.
        t_v = np.array([[1.0, 0.2], [0.3, 1.5]])
        t_i = np.array([[0.5, -1.0], [2.0, 0.1]])
        mp_v = ModalityParams(transform=t_v, shift=np.array([0.1, -0.2]))
        mp_i = ModalityParams(transform=t_i, shift=np.array([1.0, 0.5]))
        v = np.array([0.7, -1.3])
        pinv = np.linalg.solve(t_v.T @ t_v, t_v.T)
        expected = 0.3 * v + 0.7 * (t_i @ (pinv @ (v - mp_v.shift)) + mp_i.shift)
        np.testing.assert_allclose(transition_transform(v, mp_v, mp_i, 0.7), expected, atol=1e-10)

    def test_rank_deficient_transform_rejected(self):
        col = np.ones((4, 1))
        with pytest.raises(ValueError, match="rank"):
            ModalityParams(transform=np.hstack([col, col]), shift=np.zeros(4))

    def test_mix_t_out_of_range(self):
        cfg = small_cfg()
        mp_v, mp_i = make_modality_params(cfg)
        with pytest.raises(ValueError, match="mix_t"):
            transition_transform(np.zeros(cfg.obs_dim), mp_v, mp_i, 1.5)


class TestGenerateDataset:
    def test_observation_count(self):
        ds = generate_dataset(small_cfg(num_identities=50, instances_per_modality=20))
        assert ds.observations.shape == (50, 3, 20, 6)
        assert ds.observations.size == 50 * 20 * 3 * 6

    def test_deterministic(self):
        a = generate_dataset(small_cfg())
        b = generate_dataset(small_cfg())
        assert np.array_equal(a.observations, b.observations)
        assert np.array_equal(a.train_ids, b.train_ids)

    def test_transition_closer_to_infrared_than_visible(self):
        # The defining property of the transition partition.
        ds = generate_dataset(small_cfg(num_identities=20, noise_scale=0.05, mix_t=0.7))
        g_dists, v_dists = [], []
        for ident in range(ds.num_identities):
            i_obs = ds.observations[ident, 2]
            for j in range(ds.instances_per_modality):
                g_dists.append(np.linalg.norm(i_obs - ds.observations[ident, 1, j], axis=1).min())
                v_dists.append(np.linalg.norm(i_obs - ds.observations[ident, 0, j], axis=1).min())
        assert np.mean(g_dists) < np.mean(v_dists)

    def test_instance_alignment_exact(self):
        cfg = small_cfg()
        ds = generate_dataset(cfg)
        mp_v, mp_i = make_modality_params(cfg)
        for ident in (0, 3):
            expected = transition_transform(ds.observations[ident, 0], mp_v, mp_i, cfg.mix_t)
            assert np.array_equal(ds.observations[ident, 1], expected)

    def test_mix_zero_transition_equals_visible(self):
        ds = generate_dataset(small_cfg(mix_t=0.0))
        assert np.array_equal(ds.observations[:, 1], ds.observations[:, 0])

    def test_mix_one_noiseless_matches_infrared_reconstruction(self):
        cfg = small_cfg(mix_t=1.0, noise_scale=0.0)
        ds = generate_dataset(cfg)
        latents = make_identity_latents(cfg)
        _, mp_i = make_modality_params(cfg)
        for ident in range(ds.num_identities):
            clean = mp_i.transform @ latents[ident] + mp_i.shift
            for j in range(ds.instances_per_modality):
                np.testing.assert_allclose(ds.observations[ident, 1, j], clean, atol=1e-10)

    def test_split_disjoint_and_seed_stable(self):
        ds = generate_dataset(small_cfg())
        assert len(np.intersect1d(ds.train_ids, ds.test_ids)) == 0
        assert len(ds.train_ids) + len(ds.test_ids) == ds.num_identities


class TestFileRoundTrip:
    def test_bit_exact(self, tmp_path):
        ds = generate_dataset(small_cfg())
        path = tmp_path / "data.tmds"
        save_dataset(ds, path)
        back = load_dataset(path)
        assert np.array_equal(back.observations, ds.observations)
        assert np.array_equal(back.train_ids, ds.train_ids)
        assert np.array_equal(back.test_ids, ds.test_ids)
        assert back.config == ds.config

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"not a dataset")
        with pytest.raises(ValueError, match="not a trimodal dataset"):
            load_dataset(path)
