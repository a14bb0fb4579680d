"""End-to-end compression: encode an image, entropy-code the quantized
latents with the autoregressive context model, and decode it back.

Run with:  python3 demos/02_compress_decompress.py
"""

import numpy as np

from gmcodec.coder import (BitstreamHeader, compress_latents,
                           decompress_latents, pack_container, rate_estimate,
                           unpack_container)
from gmcodec.interpolation import psnr
from gmcodec.model import CodecModel, ModelConfig, quantize_round
from gmcodec.ppm import pad_to_multiple
from gmcodec.training import make_synthetic_textures

config = ModelConfig(base_channels=8, latent_channels=2, downsample_factor=8,
                     residual_blocks_per_stage=1)
model = CodecModel(config, seed=0)

# a smooth synthetic test image (any (1, 3, H, W) array in [0, 1] works)
image = make_synthetic_textures(1, 48, seed=7)[0][None]
orig_h, orig_w = image.shape[2], image.shape[3]
print(f"input image: {orig_w}x{orig_h}")

# ---------------------------------------------------------------------------
# Sender side: pad, encode, round to integers, entropy-code.
padded = pad_to_multiple(image, config.downsample_factor)
y = model.encoder.encode(padded)
z = quantize_round(y, config.alphabet_margin)
print(f"latent grid: {z.z.shape[1]}x{z.z.shape[2]}x{z.z.shape[3]} integers, "
      f"per-channel bounds {[(int(a), int(b)) for a, b in zip(z.z_min, z.z_max)]}")

payload = compress_latents(z, model.context)
header = BitstreamHeader(
    config_digest=config.digest_bytes(), orig_h=orig_h, orig_w=orig_w,
    padded_h=padded.shape[2], padded_w=padded.shape[3],
    latent_h=z.z.shape[2], latent_w=z.z.shape[3],
    latent_channels=config.latent_channels, mixtures=config.mixtures,
    z_min=z.z_min, z_max=z.z_max)
bitstream = pack_container(header, payload)

report = rate_estimate(z, model.context.field(z), orig_h * orig_w)
print(f"bitstream: {len(bitstream)} bytes "
      f"(payload {len(payload)}, header {len(bitstream) - len(payload)})")
print(f"estimated {report.bpp_estimated:.4f} bpp, "
      f"actual {8 * len(payload) / (orig_h * orig_w):.4f} bpp")

# ---------------------------------------------------------------------------
# Receiver side: unpack, decode symbols with the same context model, decode.
header2, payload2 = unpack_container(bitstream, config.digest_bytes())
z2 = decompress_latents(payload2, model.context,
                        (header2.latent_channels, header2.latent_h,
                         header2.latent_w),
                        header2.z_min, header2.z_max)
assert np.array_equal(z2.z, z.z), "entropy coding must be lossless"
print("latents recovered bit-exactly")

recon = model.decoder.decode(z2)[:, :, :orig_h, :orig_w]
print(f"reconstruction PSNR: {psnr(image, recon):.2f} dB "
      f"(untrained weights, so fidelity is poor; see demo 03)")
