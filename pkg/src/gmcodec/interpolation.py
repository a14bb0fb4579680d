"""Fidelity control after two-stage training: weight-space interpolation of
the two decoders, pixel-space interpolation of their outputs, PSNR, and the
alpha-sweep evaluator."""

import os
from dataclasses import dataclass

import numpy as np

from .autograd import Tensor
from .coder import decompress_latents, rate_estimate
from .errors import ConfigError, UsageError
from .model import Decoder, _net_rng
from .params import ParamStore

PSNR_CAP_DB = 100.0


def interpolate_networks(theta_g1, theta_g2, alpha):
    """Elementwise convex combination (1-alpha)*G1 + alpha*G2 of two
    interpolation-compatible parameter stores."""
    if not 0.0 <= alpha <= 1.0:
        raise UsageError(f"alpha must be in [0, 1], got {alpha}")
    if theta_g1.digest != theta_g2.digest:
        raise ConfigError("parameter stores were built for different configs")
    bad = theta_g1.first_incompatibility(theta_g2)
    if bad is not None:
        raise ConfigError(f"stores are not interpolation-compatible; first "
                          f"mismatched tensor: '{bad}'")
    out = ParamStore(theta_g1.digest)
    for name, t1 in theta_g1.items():
        t2 = theta_g2[name]
        if alpha == 0.0:
            data = t1.data.copy()
        elif alpha == 1.0:
            data = t2.data.copy()
        else:
            data = ((1.0 - alpha) * t1.data + alpha * t2.data).astype(t1.data.dtype)
        out.add(name, Tensor(data))
    return out


def interpolate_images(xhat1, xhat2, alpha):
    """Pixel-by-pixel convex combination, clamped to [0, 1]."""
    if not 0.0 <= alpha <= 1.0:
        raise UsageError(f"alpha must be in [0, 1], got {alpha}")
    a = np.asarray(xhat1, dtype=np.float64)
    b = np.asarray(xhat2, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigError(f"image shape mismatch {a.shape} vs {b.shape}")
    if alpha == 0.0:
        return a.copy()
    if alpha == 1.0:
        return b.copy()
    return np.clip((1.0 - alpha) * a + alpha * b, 0.0, 1.0)


def psnr(x, xhat):
    """PSNR in dB on the [0, 255] scale; identical images report a 100 dB cap."""
    a = np.asarray(x, dtype=np.float64) * 255.0
    b = np.asarray(xhat, dtype=np.float64) * 255.0
    if a.shape != b.shape:
        raise ConfigError(f"image shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(255.0 ** 2 / mse), PSNR_CAP_DB)


@dataclass
class SweepRow:
    alpha: float
    psnr_db: float
    est_bpp: float
    actual_bpp: float


@dataclass
class SweepReport:
    mode: str
    rows: list

    def to_csv(self):
        lines = ["alpha,psnr_db,est_bpp,actual_bpp"]
        for r in self.rows:
            lines.append(f"{r.alpha:.6g},{r.psnr_db:.9f},{r.est_bpp:.9f},"
                         f"{r.actual_bpp:.9f}")
        return "\n".join(lines) + "\n"


def _decode_with(config, store, z, orig_h, orig_w, seed=0):
    dec = Decoder(config, _net_rng(seed, 1))
    dec.load_params(store)
    img = dec.decode(z)
    return img[:, :, :orig_h, :orig_w]


def alpha_sweep(header, payload, context, theta_g1, theta_g2, alphas, original,
                mode="network", image_dir=None, threads=1):
    """Decompress once, decode per alpha, and report (alpha, PSNR, bpp) rows.

    `original` is the reference image (1, 3, H, W) in [0, 1]; bpp is constant
    across rows because the payload is produced once and reused. Per-alpha
    decodes are independent and run on `threads` workers when threads > 1.
    """
    config = context.config
    z = decompress_latents(payload, context,
                           (header.latent_channels, header.latent_h, header.latent_w),
                           header.z_min, header.z_max)
    n_pixels = header.orig_h * header.orig_w
    est = rate_estimate(z, context.field(z), n_pixels)
    actual_bpp = 8.0 * len(payload) / n_pixels
    endpoint_imgs = {}
    if mode == "image":
        endpoint_imgs[0.0] = _decode_with(config, theta_g1, z,
                                          header.orig_h, header.orig_w)
        endpoint_imgs[1.0] = _decode_with(config, theta_g2, z,
                                          header.orig_h, header.orig_w)
    elif mode != "network":
        raise UsageError(f"unknown interpolation mode '{mode}'")

    def reconstruct(alpha):
        if mode == "network":
            store = interpolate_networks(theta_g1, theta_g2, alpha)
            return _decode_with(config, store, z, header.orig_h, header.orig_w)
        return interpolate_images(endpoint_imgs[0.0], endpoint_imgs[1.0], alpha)

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            images = list(pool.map(reconstruct, alphas))
    else:
        images = [reconstruct(a) for a in alphas]
    rows = []
    for alpha, img in zip(alphas, images):
        rows.append(SweepRow(alpha=float(alpha),
                             psnr_db=psnr(original, img),
                             est_bpp=est.bpp_estimated,
                             actual_bpp=actual_bpp))
        if image_dir is not None:
            from .ppm import write_ppm
            write_ppm(os.path.join(image_dir, f"recon_alpha{alpha:.2f}.ppm"), img)
    return SweepReport(mode=mode, rows=rows)
