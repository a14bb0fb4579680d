"""Two-stage training at toy scale: rate-distortion optimization first,
then adversarial fine-tuning of a second decoder with the encoder and
entropy model frozen.

Run with:  python3 demos/03_two_stage_training.py   (about a minute)
"""

import numpy as np

from gmcodec.model import ModelConfig
from gmcodec.params import serialize_params
from gmcodec.training import (TrainConfig, make_synthetic_textures,
                              train_stage1, train_stage2)

config = ModelConfig(base_channels=8, latent_channels=2, downsample_factor=8,
                     residual_blocks_per_stage=1)
images = make_synthetic_textures(8, 96, seed=0)

# ---------------------------------------------------------------------------
# Stage 1: encoder, decoder G1 and context model minimize rate + lambda * MSE.
print("== stage 1: rate-distortion training ==")
tc1 = TrainConfig(stage=1, iterations=600, patch_size=64, seed=0,
                  lambda_d1=0.05, lr_schedule=(360, 510))
log1 = []
ckpt1 = train_stage1(config, tc1, images, loss_log=log1)
for i in (0, 100, 300, 599):
    row = log1[i]
    print(f"  iter {row['iteration']:4d}: loss {row['loss']:10.1f}  "
          f"rate {row['rate_bpp']:.3f} bpp  mse {row['mse']:.1f}")
print(f"  loss fell to {log1[-1]['loss'] / log1[0]['loss']:.1%} of initial")

# ---------------------------------------------------------------------------
# Stage 2: G2 starts as a copy of G1 and trains against a discriminator.
# The encoder and context model never move, so the bitstream is unchanged.
print("\n== stage 2: adversarial fine-tuning of G2 ==")
tc2 = TrainConfig(stage=2, iterations=150, patch_size=64, seed=0)
log2 = []
ckpt2 = train_stage2(config, tc2, images, ckpt1, loss_log=log2)
for i in (0, 50, 149):
    row = log2[i]
    print(f"  iter {row['iteration']:4d}: generator {row['g_loss']:8.3f}  "
          f"discriminator {row['d_loss']:6.3f}  adversarial {row['adv']:6.3f}")

frozen = serialize_params(ckpt2.stores["encoder"]) == \
    serialize_params(ckpt1.stores["encoder"]) and \
    serialize_params(ckpt2.stores["context"]) == \
    serialize_params(ckpt1.stores["context"])
moved = serialize_params(ckpt2.stores["decoder_g2"]) != \
    serialize_params(ckpt1.stores["decoder_g1"])
print(f"\nencoder/context byte-identical across stage 2: {frozen}")
print(f"G2 diverged from its G1 starting point: {moved}")
