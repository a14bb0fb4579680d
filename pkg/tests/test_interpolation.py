import numpy as np
import pytest

from gmcodec.autograd import Tensor
from gmcodec.coder import BitstreamHeader, compress_latents
from gmcodec.errors import ConfigError, UsageError
from gmcodec.interpolation import (PSNR_CAP_DB, SweepReport, SweepRow,
                                   alpha_sweep, interpolate_images,
                                   interpolate_networks, psnr)
from gmcodec.model import CodecModel, quantize_round
from gmcodec.params import ParamStore, serialize_params

RNG = np.random.default_rng(31)


def _store(digest, values):
    ps = ParamStore(digest)
    for name, v in values.items():
        ps.add(name, Tensor(np.asarray(v, dtype=np.float32)))
    return ps


class TestNetworkInterpolation:
    DIGEST = b"\x11" * 32

    def _pair(self):
        a = _store(self.DIGEST, {"w": [1.0, 2.0], "b": [[3.0], [5.0]]})
        b = _store(self.DIGEST, {"w": [3.0, 4.0], "b": [[7.0], [1.0]]})
        return a, b

    def test_endpoints_bit_identical(self):
        a, b = self._pair()
        assert serialize_params(interpolate_networks(a, b, 0.0)) == \
            serialize_params(a)
        assert serialize_params(interpolate_networks(a, b, 1.0)) == \
            serialize_params(b)

    def test_alpha_08_blend(self):
        a, b = self._pair()
        out = interpolate_networks(a, b, 0.8)
        # 0.2*1 + 0.8*3 = 2.6; 0.2*2 + 0.8*4 = 3.6
        assert np.allclose(out["w"].data, [2.6, 3.6], atol=1e-6)

    def test_composition_identity(self):
        # interp(interp(A, B, 0.5), B, 0.5) == interp(A, B, 0.75)
        a, b = self._pair()
        two_step = interpolate_networks(interpolate_networks(a, b, 0.5), b, 0.5)
        one_step = interpolate_networks(a, b, 0.75)
        for name, t in two_step.items():
            assert np.allclose(t.data, one_step[name].data, atol=1e-6)

    def test_convexity_bound(self):
        a, b = self._pair()
        for alpha in (0.1, 0.5, 0.9):
            out = interpolate_networks(a, b, alpha)
            for name, t in out.items():
                lo = np.minimum(a[name].data, b[name].data)
                hi = np.maximum(a[name].data, b[name].data)
                assert np.all(t.data >= lo - 1e-6)
                assert np.all(t.data <= hi + 1e-6)

    def test_alpha_out_of_range(self):
        a, b = self._pair()
        for alpha in (-0.1, 1.1):
            with pytest.raises(UsageError):
                interpolate_networks(a, b, alpha)

    def test_digest_mismatch(self):
        a = _store(b"\x11" * 32, {"w": [1.0]})
        b = _store(b"\x22" * 32, {"w": [2.0]})
        with pytest.raises(ConfigError):
            interpolate_networks(a, b, 0.5)

    def test_incompatible_shapes_named(self):
        a = _store(self.DIGEST, {"w": [1.0, 2.0]})
        b = _store(self.DIGEST, {"w": [1.0, 2.0, 3.0]})
        with pytest.raises(ConfigError, match="'w'"):
            interpolate_networks(a, b, 0.5)


class TestImageInterpolation:
    def test_endpoints_exact(self):
        a = RNG.uniform(0, 1, (1, 3, 4, 4))
        b = RNG.uniform(0, 1, (1, 3, 4, 4))
        assert np.array_equal(interpolate_images(a, b, 0.0), a)
        assert np.array_equal(interpolate_images(a, b, 1.0), b)

    def test_midpoint(self):
        a = np.zeros((1, 3, 2, 2))
        b = np.ones((1, 3, 2, 2))
        assert np.allclose(interpolate_images(a, b, 0.5), 0.5)

    def test_result_clamped(self):
        a = np.full((1, 3, 2, 2), 0.0)
        b = np.full((1, 3, 2, 2), 1.5)  # out-of-range input
        out = interpolate_images(a, b, 0.9)
        assert out.max() <= 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ConfigError):
            interpolate_images(np.zeros((1, 3, 2, 2)), np.zeros((1, 3, 2, 3)), 0.5)


class TestPsnr:
    def test_known_value_mse_one(self):
        # MSE = 1 on the 255 scale: 20*log10(255) = 48.1308... dB
        x = np.zeros((1, 3, 10, 10))
        xhat = np.full((1, 3, 10, 10), 1.0 / 255.0)
        assert psnr(x, xhat) == pytest.approx(48.13080361, abs=1e-6)

    def test_identical_images_capped(self):
        x = RNG.uniform(0, 1, (1, 3, 4, 4))
        assert psnr(x, x) == PSNR_CAP_DB

    def test_monotone_in_noise(self):
        x = RNG.uniform(0.2, 0.8, (1, 3, 16, 16))
        vals = [psnr(x, x + level) for level in (0.001, 0.01, 0.05, 0.2)]
        assert vals == sorted(vals, reverse=True)

    def test_matches_independent_reimplementation(self):
        x = RNG.uniform(0, 1, (1, 3, 8, 8))
        xhat = np.clip(x + RNG.normal(0, 0.03, x.shape), 0, 1)
        mse = np.mean((255 * (x - xhat)) ** 2)
        assert psnr(x, xhat) == pytest.approx(10 * np.log10(255 ** 2 / mse),
                                              rel=1e-12)


class TestSweep:
    def _setup(self, tiny_config):
        model = CodecModel(tiny_config, seed=3)
        x = RNG.uniform(0, 1, (1, 3, 16, 16)).astype(np.float32)
        y = model.encoder.encode(x)
        z = quantize_round(y)
        payload = compress_latents(z, model.context)
        header = BitstreamHeader(
            config_digest=tiny_config.digest_bytes(),
            orig_h=16, orig_w=16, padded_h=16, padded_w=16,
            latent_h=z.z.shape[2], latent_w=z.z.shape[3],
            latent_channels=z.z.shape[1], mixtures=tiny_config.mixtures,
            z_min=z.z_min, z_max=z.z_max)
        g1 = model.decoder.param_store()
        model2 = CodecModel(tiny_config, seed=99)
        g2 = model2.decoder.param_store()
        return model, x, header, payload, g1, g2

    def test_rows_and_constant_bpp(self, tiny_config):
        model, x, header, payload, g1, g2 = self._setup(tiny_config)
        alphas = [0.0, 0.5, 1.0]
        rep = alpha_sweep(header, payload, model.context, g1, g2, alphas, x)
        assert rep.mode == "network"
        assert [r.alpha for r in rep.rows] == alphas
        bpps = {(r.est_bpp, r.actual_bpp) for r in rep.rows}
        assert len(bpps) == 1  # same bitstream for every alpha
        assert rep.rows[0].actual_bpp == pytest.approx(
            8.0 * len(payload) / 256, rel=1e-12)

    def test_endpoints_match_direct_decode(self, tiny_config):
        model, x, header, payload, g1, g2 = self._setup(tiny_config)
        rep = alpha_sweep(header, payload, model.context, g1, g2,
                          [0.0, 1.0], x)
        y = model.encoder.encode(x)
        z = quantize_round(y)
        direct_g1 = model.decoder.decode(z)
        assert rep.rows[0].psnr_db == pytest.approx(psnr(x, direct_g1),
                                                    abs=1e-9)

    def test_image_mode_and_files(self, tiny_config, tmp_path):
        model, x, header, payload, g1, g2 = self._setup(tiny_config)
        rep = alpha_sweep(header, payload, model.context, g1, g2,
                          [0.0, 0.5, 1.0], x, mode="image",
                          image_dir=str(tmp_path))
        assert rep.mode == "image"
        for alpha in (0.0, 0.5, 1.0):
            assert (tmp_path / f"recon_alpha{alpha:.2f}.ppm").exists()
        # image mode endpoints agree with network mode endpoints
        rep_net = alpha_sweep(header, payload, model.context, g1, g2,
                              [0.0, 1.0], x, mode="network")
        assert rep.rows[0].psnr_db == pytest.approx(rep_net.rows[0].psnr_db,
                                                    abs=1e-9)
        assert rep.rows[2].psnr_db == pytest.approx(rep_net.rows[1].psnr_db,
                                                    abs=1e-9)

    def test_threaded_matches_serial(self, tiny_config):
        model, x, header, payload, g1, g2 = self._setup(tiny_config)
        alphas = [0.0, 0.25, 0.5, 0.75, 1.0]
        serial = alpha_sweep(header, payload, model.context, g1, g2, alphas, x)
        threaded = alpha_sweep(header, payload, model.context, g1, g2, alphas,
                               x, threads=3)
        for a, b in zip(serial.rows, threaded.rows):
            assert a.psnr_db == b.psnr_db

    def test_bad_mode(self, tiny_config):
        model, x, header, payload, g1, g2 = self._setup(tiny_config)
        with pytest.raises(UsageError):
            alpha_sweep(header, payload, model.context, g1, g2, [0.5], x,
                        mode="latent")

    def test_csv_format(self):
        rep = SweepReport(mode="network", rows=[
            SweepRow(alpha=0.0, psnr_db=30.0, est_bpp=0.5, actual_bpp=0.51),
            SweepRow(alpha=1.0, psnr_db=28.0, est_bpp=0.5, actual_bpp=0.51)])
        lines = rep.to_csv().strip().split("\n")
        assert lines[0] == "alpha,psnr_db,est_bpp,actual_bpp"
        assert len(lines) == 3
        assert lines[1].startswith("0,30")
