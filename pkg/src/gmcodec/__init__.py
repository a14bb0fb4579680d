"""gmcodec: a self-contained learned image codec.

Analysis/synthesis networks over a minimal autodiff engine, a Gaussian-
mixture context-adaptive entropy model with a bit-exact range coder,
two-stage (rate-distortion, then adversarial) training at desk scale, and
fidelity-controllable decoding via decoder-weight interpolation.
"""

from . import autograd
from .autograd import Tensor, backward, no_grad
from .coder import (BitstreamHeader, RangeDecoder, RangeEncoder, RateReport,
                    SymbolDistribution, build_symbol_distribution,
                    compress_latents, decompress_latents, gmm_integer_pmf,
                    pack_container, range_decode, range_encode, rate_estimate,
                    unpack_container)
from .interpolation import (SweepReport, alpha_sweep, interpolate_images,
                            interpolate_networks, psnr)
from .model import (CodecModel, ContextModel, Decoder, Discriminator, Encoder,
                    GmmField, ModelConfig, QuantizedLatents, quantize_noise,
                    quantize_round, round_half_away)
from .optim import AdamState, adam_step
from .params import ParamStore, load_weights, save_weights
from .ppm import pad_to_multiple, read_ppm, write_ppm
from .training import (Checkpoint, FeatureExtractor, TrainConfig, feature_loss,
                       load_checkpoint, loss_stage1, loss_stage2, lsgan_losses,
                       make_synthetic_textures, mse_loss, rate_loss,
                       sample_patches, save_checkpoint, train_stage1,
                       train_stage2)

__version__ = "0.1.0"
