"""Generator, discriminator, truncation, noise schedule, snapshots."""

import numpy as np
import pytest

import tinystyle.autodiff.tape as T
from tinystyle.autodiff import Tensor, grad_check
from tinystyle.errors import ShapeError, SnapshotFormatError
from tinystyle.models import (
    Discriminator,
    Generator,
    MappingNetwork,
    ModelConfig,
    NoiseConfig,
    TruncationConfig,
    discriminate,
    map_latent,
    mean_w,
    style_mixing,
    synthesize,
    truncate,
)
from tinystyle.snapshot import load_models, load_tensors, save_models, save_tensors


def _mapping(depth, dim=8, seed=0):
    cfg = ModelConfig(resolution=8, z_dim=dim, mapping_depth=depth,
                      base_channels=8, min_channels=4)
    return MappingNetwork(cfg, np.random.default_rng(seed))


class TestMapLatent:
    def test_depth0_unit_vector_passthrough(self):
        net = _mapping(depth=0, dim=4)
        z = np.array([1.0, -1.0, 1.0, -1.0], np.float32)  # mean(z^2) = 1
        w = map_latent(net, z)
        np.testing.assert_allclose(w.data, z, atol=1e-6)

    def test_depth0_constant_vector_normalizes(self):
        net = _mapping(depth=0, dim=6)
        z = np.full(6, 3.5, np.float32)
        w = map_latent(net, z)
        np.testing.assert_allclose(w.data, np.ones(6), atol=1e-6)

    def test_deterministic(self, rng):
        net = _mapping(depth=3)
        z = rng.standard_normal((4, 8)).astype(np.float32)
        np.testing.assert_array_equal(map_latent(net, z).data,
                                      map_latent(net, z).data)

    def test_dimension_mismatch(self):
        net = _mapping(depth=1, dim=8)
        with pytest.raises(ShapeError):
            map_latent(net, np.zeros((2, 5), np.float32))


class TestMeanW:
    def test_depth0_mean_is_near_zero(self):
        cfg = ModelConfig(resolution=8, z_dim=64, mapping_depth=0,
                          base_channels=8, min_channels=4)
        net = MappingNetwork(cfg, np.random.default_rng(0))
        wbar = mean_w(net, 100_000, seed=9)
        assert np.abs(wbar).max() < 0.02

    def test_n1_equals_map_latent(self):
        net = _mapping(depth=2)
        wbar = mean_w(net, 1, seed=3)
        z = np.random.default_rng(3).standard_normal((1, 8), dtype=np.float32)
        np.testing.assert_allclose(wbar, map_latent(net, z).data[0], rtol=1e-6)

    def test_deterministic(self):
        net = _mapping(depth=2)
        np.testing.assert_array_equal(mean_w(net, 100, seed=4),
                                      mean_w(net, 100, seed=4))

    def test_n_zero_rejected(self):
        with pytest.raises(ValueError):
            mean_w(_mapping(depth=1), 0, seed=0)


class TestTruncate:
    W = np.arange(6, dtype=np.float32)
    WBAR = np.full(6, 0.25, np.float32)

    def test_psi_one_is_identity_bitwise(self):
        cfg = TruncationConfig(psi=1.0, w_mean=self.WBAR, cutoff=32)
        out = truncate(self.W, cfg, layer_resolution=8)
        assert out is self.W

    def test_psi_zero_returns_mean(self):
        cfg = TruncationConfig(psi=0.0, w_mean=self.WBAR, cutoff=32)
        np.testing.assert_array_equal(truncate(self.W, cfg, 8), self.WBAR)

    def test_layers_above_cutoff_untouched(self):
        cfg = TruncationConfig(psi=0.7, w_mean=self.WBAR, cutoff=32)
        out = truncate(self.W, cfg, layer_resolution=64)
        assert out is self.W

    def test_interpolation_formula(self):
        cfg = TruncationConfig(psi=0.5, w_mean=self.WBAR, cutoff=32)
        np.testing.assert_allclose(truncate(self.W, cfg, 8),
                                   self.WBAR + 0.5 * (self.W - self.WBAR))


class TestAdain:
    def test_standardized_input_unchanged(self, rng):
        x = rng.standard_normal((1, 1, 8, 8))
        x = (x - x.mean()) / x.std()
        y = T.adain(Tensor(x), Tensor(np.ones(1, np.float64)),
                    Tensor(np.zeros(1, np.float64)))
        np.testing.assert_allclose(y.data, x, atol=1e-6)

    def test_hand_normalization(self):
        x = Tensor(np.array([[[[1.0, 3.0]]]]))
        y = T.adain(x, Tensor(np.array([2.0], np.float64)),
                    Tensor(np.array([1.0], np.float64)))
        np.testing.assert_allclose(y.data.ravel(), [-1.0, 3.0], atol=1e-6)

    def test_constant_channel_becomes_bias(self):
        x = Tensor(np.full((1, 1, 4, 4), 7.0))
        y = T.adain(x, Tensor(np.array([5.0], np.float64)),
                    Tensor(np.array([2.0], np.float64)))
        np.testing.assert_allclose(y.data, np.full((1, 1, 4, 4), 2.0), atol=1e-3)

    def test_output_moments_match_style(self, rng):
        x = Tensor(3.0 * rng.standard_normal((2, 3, 16, 16)))
        scale = rng.standard_normal(3)
        bias = rng.standard_normal(3)
        y = T.adain(x, Tensor(scale), Tensor(bias)).data
        for n in range(2):
            for c in range(3):
                ch = y[n, c]
                assert abs(ch.mean() - bias[c]) < 1e-3
                assert abs(ch.std() - abs(scale[c])) < 1e-3


class TestInjectNoise:
    def test_zero_scale_identity(self, rng):
        x = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
        nz = rng.standard_normal((2, 1, 4, 4)).astype(np.float32)
        y = T.inject_noise(Tensor(x), Tensor(nz), Tensor(np.zeros(3, np.float32)))
        np.testing.assert_array_equal(y.data, x)

    def test_zero_noise_identity(self, rng):
        x = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
        y = T.inject_noise(Tensor(x), Tensor(np.zeros((2, 1, 4, 4), np.float32)),
                           Tensor(np.ones(3, np.float32)))
        np.testing.assert_array_equal(y.data, x)

    def test_direct_arithmetic(self):
        x = Tensor(np.zeros((1, 1, 1, 1)))
        nz = Tensor(np.full((1, 1, 1, 1), 1.5))
        y = T.inject_noise(x, nz, Tensor(np.array([2.0], np.float64)))
        assert y.data.ravel()[0] == pytest.approx(3.0)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            T.inject_noise(Tensor(rng.standard_normal((1, 2, 4, 4))),
                           Tensor(rng.standard_normal((1, 1, 3, 3))),
                           Tensor(np.zeros(2)))


class TestSynthesize:
    def test_output_shape_and_layer_count(self, tiny_gen):
        assert tiny_gen.layer_resolutions == (4, 8, 16)
        z = np.random.default_rng(1).standard_normal((3, 16), dtype=np.float32)
        img = tiny_gen.generate(z)
        assert img.shape == (3, 3, 16, 16)

    def test_disabled_noise_ignores_seeds(self, tiny_gen, rng):
        z = rng.standard_normal((2, 16), dtype=np.float32)
        a = tiny_gen.generate(z, NoiseConfig.from_seed(1, 3, mode="none"))
        b = tiny_gen.generate(z, NoiseConfig.from_seed(2, 3, mode="none"))
        np.testing.assert_array_equal(a, b)

    def test_coarse_only_depends_only_on_coarse_layers(self, tiny_gen, rng):
        z = rng.standard_normal((2, 16), dtype=np.float32)
        # boundary 8: layers at 4 and 8 are coarse, 16 is fine
        base = NoiseConfig(mode="coarse_only", boundary=8, seeds=(10, 11, 12))
        fine_changed = NoiseConfig(mode="coarse_only", boundary=8, seeds=(10, 11, 99))
        coarse_changed = NoiseConfig(mode="coarse_only", boundary=8, seeds=(10, 77, 12))
        img = tiny_gen.generate(z, base)
        np.testing.assert_array_equal(img, tiny_gen.generate(z, fine_changed))
        assert not np.array_equal(img, tiny_gen.generate(z, coarse_changed))

    def test_style_count_mismatch(self, tiny_gen):
        w = np.zeros((1, 16), np.float32)
        with pytest.raises(ShapeError):
            synthesize(tiny_gen, [w] * 2, NoiseConfig.from_seed(0, 3))

    def test_mask_length_checked(self, tiny_gen):
        with pytest.raises(ShapeError):
            NoiseConfig(mode="mask", mask=(True,)).enabled_mask((4, 8, 16))


class TestDiscriminator:
    def test_scores_shape_and_finite(self, tiny_gen, tiny_disc, rng):
        imgs = tiny_gen.generate(rng.standard_normal((4, 16), dtype=np.float32))
        scores = discriminate(tiny_disc, imgs)
        assert scores.shape == (4,)
        assert np.isfinite(scores.data).all()

    def test_duplicated_sample_duplicated_score(self, tiny_disc, rng):
        img = rng.standard_normal((1, 3, 16, 16)).astype(np.float32)
        batch = np.concatenate([img, img], axis=0)
        scores = discriminate(tiny_disc, batch).data
        assert scores[0] == scores[1]

    def test_resolution_mismatch(self, tiny_disc, rng):
        with pytest.raises(ShapeError):
            discriminate(tiny_disc, rng.standard_normal((1, 3, 8, 8)))

    def test_score_gradient_wrt_image(self):
        cfg = ModelConfig(resolution=8, z_dim=8, mapping_depth=1,
                          base_channels=8, min_channels=4)
        disc = Discriminator(cfg, seed=5, dtype=np.float64)

        def f(x):
            return T.sum_all(disc(x))

        pt = np.random.default_rng(0).standard_normal((1, 3, 8, 8))
        assert grad_check(f, pt, h=1e-5) < 1e-6


class TestStyleMixing:
    def test_k_zero_all_w2(self):
        assert style_mixing("w1", "w2", 0, 4) == ["w2"] * 4

    def test_k_full_all_w1(self):
        assert style_mixing("w1", "w2", 4, 4) == ["w1"] * 4

    def test_split(self):
        assert style_mixing("a", "b", 2, 4) == ["a", "a", "b", "b"]

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            style_mixing("a", "b", 5, 4)


class TestGeneratorTruncationIdentities:
    def test_psi1_bit_identical(self, tiny_gen, rng):
        z = rng.standard_normal((4, 16), dtype=np.float32)
        noise = NoiseConfig.from_seed(3, tiny_gen.num_layers)
        wbar = mean_w(tiny_gen.mapping, 200, seed=0)
        plain = tiny_gen.generate(z, noise)
        trunc = tiny_gen.generate(z, noise,
                                  TruncationConfig(psi=1.0, w_mean=wbar, cutoff=32))
        np.testing.assert_array_equal(plain, trunc)

    def test_psi0_equals_direct_mean_synthesis(self, tiny_gen, rng):
        z = rng.standard_normal((4, 16), dtype=np.float32)
        noise = NoiseConfig.from_seed(3, tiny_gen.num_layers)
        wbar = mean_w(tiny_gen.mapping, 200, seed=0)
        via_trunc = tiny_gen.generate(
            z, noise, TruncationConfig(psi=0.0, w_mean=wbar, cutoff=32))
        styles = [np.broadcast_to(wbar, (4, 16)).copy()] * tiny_gen.num_layers
        direct = synthesize(tiny_gen, styles, noise).data
        np.testing.assert_array_equal(via_trunc, direct)

    def test_truncation_continuity(self, tiny_gen, rng):
        z = rng.standard_normal((2, 16), dtype=np.float32)
        noise = NoiseConfig.from_seed(3, tiny_gen.num_layers)
        wbar = mean_w(tiny_gen.mapping, 200, seed=0)

        def img(psi):
            return tiny_gen.generate(
                z, noise, TruncationConfig(psi=psi, w_mean=wbar, cutoff=32))

        base = img(0.7)
        lipschitz = np.abs(img(0.8) - base).max() / 0.1
        small = np.abs(img(0.7 + 1e-3) - base).max()
        assert small <= 2.0 * lipschitz * 1e-3 + 1e-6


class TestComposedGradient:
    def test_g_then_d_scalar_passes_gradcheck(self):
        cfg = ModelConfig(resolution=8, z_dim=6, mapping_depth=1,
                          base_channels=8, min_channels=4)
        gen = Generator(cfg, seed=1, dtype=np.float64)
        disc = Discriminator(cfg, seed=2, dtype=np.float64)
        noises = NoiseConfig.from_seed(5, gen.num_layers).realize(
            gen.layer_resolutions, 1, np.float64)

        def f(z):
            w = gen.mapping(z)
            img = gen.synthesis([w] * gen.num_layers, noises)
            return T.sum_all(disc(img))

        pt = np.random.default_rng(7).standard_normal((1, 6))
        assert grad_check(f, pt, h=1e-5) < 1e-6


class TestSnapshotContainer:
    def test_roundtrip_bit_exact(self, tiny_gen, tiny_disc, tmp_path, rng):
        path = tmp_path / "snap.sgfw1"
        save_models(path, tiny_gen.cfg, 42, tiny_gen, tiny_gen.get_arrays(),
                    tiny_disc, rng_state={"k": 1})
        snap = load_models(path)
        assert snap.step == 42
        for name, arr in tiny_gen.get_arrays().items():
            np.testing.assert_array_equal(snap.gen.params()[name].data, arr)
        z = rng.standard_normal((2, 16), dtype=np.float32)
        noise = NoiseConfig.from_seed(0, 3)
        np.testing.assert_array_equal(snap.gen.generate(z, noise),
                                      tiny_gen.generate(z, noise))

    def test_save_is_deterministic(self, tiny_gen, tiny_disc, tmp_path):
        a, b = tmp_path / "a.sgfw1", tmp_path / "b.sgfw1"
        for path in (a, b):
            save_models(path, tiny_gen.cfg, 1, tiny_gen,
                        tiny_gen.get_arrays(), tiny_disc)
        assert a.read_bytes() == b.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.sgfw1"
        path.write_bytes(b"NOPE!" + bytes(10))
        with pytest.raises(SnapshotFormatError, match="magic"):
            load_tensors(path)

    def test_truncated_payload(self, tmp_path, rng):
        path = tmp_path / "t.sgfw1"
        save_tensors(path, {}, 0, None, {"w": rng.standard_normal((4, 4)).astype(np.float32)})
        raw = path.read_bytes()
        path.write_bytes(raw[:-1])
        with pytest.raises(SnapshotFormatError, match="truncated"):
            load_tensors(path)

    def test_trailing_bytes_rejected(self, tmp_path, rng):
        path = tmp_path / "t.sgfw1"
        save_tensors(path, {}, 0, None, {"w": rng.standard_normal(3).astype(np.float32)})
        path.write_bytes(path.read_bytes() + b"x")
        with pytest.raises(SnapshotFormatError, match="trailing"):
            load_tensors(path)


class TestModelConfig:
    def test_resolution_must_be_power_of_two(self):
        with pytest.raises(ValueError):
            ModelConfig(resolution=24)

    def test_channel_halving(self):
        cfg = ModelConfig(resolution=32, base_channels=64, min_channels=8)
        assert [cfg.channels(r) for r in (4, 8, 16, 32)] == [64, 32, 16, 8]

    def test_two_convs_per_block_doubles_layers(self):
        cfg = ModelConfig(resolution=16, convs_per_block=2)
        assert cfg.layer_resolutions() == (4, 4, 8, 8, 16, 16)

    def test_roundtrip_dict(self, tiny_cfg):
        assert ModelConfig.from_dict(tiny_cfg.to_dict()) == tiny_cfg
