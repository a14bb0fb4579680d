"""Losses and the two-stage training procedure.

Stage 1 trains encoder, decoder G1 and entropy model end-to-end on the
rate-distortion objective. Stage 2 copies G1 into G2 and fine-tunes only
G2 adversarially (LSGAN) with a frozen encoder and entropy model, so the
latent code and its probabilities never change.
"""

import hashlib
import struct
import warnings
from dataclasses import dataclass, field, fields

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .coder import PMF_FLOOR
from .errors import CodecError, ConfigError, UsageError
from .model import CodecModel, Decoder, ModelConfig, _he_init, _net_rng, \
    quantize_noise, round_half_away
from .optim import AdamState, adam_step
from .params import ParamStore, deserialize_params, serialize_params

_LN2 = float(np.log(2.0))


# ---------------------------------------------------------------------------
# losses

def mse_loss(x, xhat):
    """Mean squared error with both images rescaled to [0, 255]."""
    if x.data.shape != xhat.data.shape:
        raise ConfigError(f"mse_loss: shape mismatch {x.data.shape} vs "
                          f"{xhat.data.shape}")
    diff = ag.mul(ag.sub(x, xhat), 255.0)
    return ag.mean(ag.square(diff))


def rate_loss(z_noisy, weights, mu, sigma, n_pixels):
    """Differentiable estimated bitrate: -(1/N) sum log2 p(z_i).

    z_noisy: (N, C, h, w); weights/mu/sigma: (N, K, C, h, w). N counts the
    pixels of the original image batch.
    """
    k = weights.data.shape[1]
    zk = ag.repeat_new_axis(z_noisy, 1, k)
    upper = ag.gaussian_cdf(ag.div(ag.sub(ag.add(zk, 0.5), mu), sigma))
    lower = ag.gaussian_cdf(ag.div(ag.sub(ag.add(zk, -0.5), mu), sigma))
    p = ag.tensor_sum(ag.mul(weights, ag.sub(upper, lower)), axis=1)
    p = ag.maximum_const(p, PMF_FLOOR)
    bits = ag.mul(ag.tensor_sum(ag.log(p)), -1.0 / _LN2)
    return ag.mul(bits, 1.0 / float(n_pixels))


def loss_stage1(x, xhat, z_noisy, gmm_params, lambda_d1):
    """Rate + lambda_d1 * MSE (the stage-1 objective)."""
    if lambda_d1 < 0:
        raise UsageError(f"lambda_d1 must be >= 0, got {lambda_d1}")
    weights, mu, sigma = gmm_params
    n_pixels = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
    r = rate_loss(z_noisy, weights, mu, sigma, n_pixels)
    d = mse_loss(x, xhat)
    return ag.add(r, ag.mul(d, float(lambda_d1)))


def _scale_mean(maps, target):
    """Mean of (map - target)^2 per scale, averaged across scales."""
    total = None
    for m in maps:
        v = ag.mean(ag.square(ag.sub(m, float(target)))) if target else \
            ag.mean(ag.square(m))
        total = v if total is None else ag.add(total, v)
    return ag.mul(total, 1.0 / len(maps))


def lsgan_generator_loss(fake_maps):
    """E[(D(xhat) - 1)^2], averaged over the three scales."""
    return _scale_mean(fake_maps, 1.0)


def lsgan_discriminator_loss(real_maps, fake_maps):
    """E[D(xhat)^2] + E[(D(x) - 1)^2], averaged over the three scales."""
    return ag.add(_scale_mean(fake_maps, 0.0), _scale_mean(real_maps, 1.0))


def lsgan_losses(real_maps, fake_maps):
    """(generator loss, discriminator loss) from discriminator score maps."""
    return lsgan_generator_loss(fake_maps), lsgan_discriminator_loss(real_maps, fake_maps)


class FeatureExtractor:
    """Fixed (never trained) convolutional stack used as a perceptual-feature
    substitute; features are taken after the fourth stage."""

    STAGES = ((3, 8, 2), (8, 16, 2), (16, 32, 2), (32, 32, 1))

    def __init__(self, seed=0, dtype=np.float32):
        rng = np.random.Generator(np.random.Philox(key=[seed, 0xFEA7]))
        self.weights = []
        self.biases = []
        for cin, cout, _stride in self.STAGES:
            self.weights.append(Tensor(_he_init(rng, cout, cin, 3, 3, dtype)))
            self.biases.append(Tensor(np.zeros(cout, dtype=dtype)))

    def __call__(self, x):
        t = x
        for (cin, cout, stride), w, b in zip(self.STAGES, self.weights, self.biases):
            t = ag.leaky_relu(ag.conv2d(t, w, b, stride=stride, pad=1), 0.2)
        return t


def feature_loss(x, xhat, extractor):
    """Mean absolute difference of the extractor's designated feature maps."""
    return ag.mean(ag.absolute(ag.sub(extractor(x), extractor(xhat))))


def loss_stage2(x, xhat, fake_maps, extractor, lambda_d2=0.01, lambda_adv=1.0,
                lambda_feat=20.0):
    """Stage-2 generator objective: weighted MSE + LSGAN + feature loss."""
    total = Tensor(np.zeros((), dtype=np.float64))
    if lambda_d2:
        total = ag.add(total, ag.mul(mse_loss(x, xhat), float(lambda_d2)))
    if lambda_adv:
        total = ag.add(total, ag.mul(lsgan_generator_loss(fake_maps), float(lambda_adv)))
    if lambda_feat:
        total = ag.add(total, ag.mul(feature_loss(x, xhat, extractor), float(lambda_feat)))
    return total


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class TrainConfig:
    stage: int = 1
    lambda_d1: float = 0.1
    lambda_d2: float = 0.01
    lambda_adv: float = 1.0
    lambda_feat: float = 20.0
    lr: float = 2e-4
    lr_schedule: tuple = ()       # absolute iterations at which lr is halved
    batch_size: int = 1
    patch_size: int = 64
    iterations: int = 2000
    seed: int = 0
    feature_spec: str = "random:0"

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        for name in ("lambda_d1", "lambda_d2", "lambda_adv", "lambda_feat"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        sched = list(self.lr_schedule)
        if sched != sorted(set(sched)):
            raise ConfigError("lr_schedule iterations must be strictly increasing")

    def canonical(self):
        parts = [f"{f.name}={getattr(self, f.name)}" for f in fields(self)]
        return "gmcodec-trainconfig-v1|" + "|".join(parts)

    def digest_bytes(self):
        return hashlib.sha256(self.canonical().encode()).digest()

    def feature_extractor(self):
        kind, _, arg = self.feature_spec.partition(":")
        if kind != "random":
            raise ConfigError(f"unknown feature extractor spec '{self.feature_spec}'")
        return FeatureExtractor(seed=int(arg or 0))


def default_lr_schedule(iterations):
    """Halve at 60% and 85% of the run (scaled-down two-step schedule)."""
    return (int(0.6 * iterations), int(0.85 * iterations))


def parse_train_config(path, overrides=None):
    """Read a plain-text key=value file into a TrainConfig."""
    values = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"bad config line: '{line}'")
            key, _, raw = line.partition("=")
            values[key.strip()] = raw.strip()
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    kwargs = {}
    for f in fields(TrainConfig):
        if f.name not in values:
            continue
        raw = values[f.name]
        if f.name == "lr_schedule":
            kwargs[f.name] = tuple(int(v) for v in str(raw).split(",") if v != "") \
                if not isinstance(raw, tuple) else raw
        elif f.type == "float" or f.name.startswith(("lambda_", "lr")):
            kwargs[f.name] = float(raw)
        elif f.name == "feature_spec":
            kwargs[f.name] = str(raw)
        else:
            kwargs[f.name] = int(raw)
    unknown = set(values) - {f.name for f in fields(TrainConfig)}
    if unknown:
        raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
    return TrainConfig(**kwargs)


# ---------------------------------------------------------------------------
# data

def sample_patches(images, patch_size, rng, batch_size=1):
    """Uniform random crops as a (B, 3, p, p) batch; undersized images are
    skipped with a warning."""
    usable = []
    for img in images:
        if img.shape[-2] >= patch_size and img.shape[-1] >= patch_size:
            usable.append(img)
        else:
            warnings.warn(f"skipping image of size {img.shape[-2]}x{img.shape[-1]} "
                          f"(smaller than patch size {patch_size})")
    if not usable:
        raise UsageError("no image is large enough for the requested patch size")
    out = np.empty((batch_size, 3, patch_size, patch_size), dtype=np.float32)
    for b in range(batch_size):
        img = usable[rng.integers(len(usable))]
        h0 = int(rng.integers(img.shape[-2] - patch_size + 1))
        w0 = int(rng.integers(img.shape[-1] - patch_size + 1))
        out[b] = img[:, h0:h0 + patch_size, w0:w0 + patch_size]
    return out


def make_synthetic_textures(count, size, seed=0):
    """Smooth band-limited random textures in [0, 1], as (3, size, size) arrays."""
    rng = np.random.Generator(np.random.Philox(key=[seed, 0x7E57]))
    images = []
    for _ in range(count):
        low = rng.standard_normal((3, size // 8, size // 8))
        img = np.repeat(np.repeat(low, 8, axis=1), 8, axis=2)
        yy, xx = np.mgrid[0:size, 0:size] / size
        for _ in range(3):
            fx, fy = rng.uniform(1, 8, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            img += 0.5 * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)[None]
        img -= img.min()
        img /= max(img.max(), 1e-8)
        images.append(img.astype(np.float32))
    return images


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"GMCK"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    model_config: ModelConfig
    iteration: int
    train_digest: bytes
    stores: dict = field(default_factory=dict)       # name -> ParamStore
    adam_states: dict = field(default_factory=dict)  # name -> AdamState


def _serialize_adam(state):
    out = bytearray()
    out += struct.pack("<Qdddd", state.t, state.lr, state.beta1, state.beta2, state.eps)
    out += struct.pack("<I", len(state.m))
    for name in state.m:
        nb = name.encode()
        m = np.ascontiguousarray(state.m[name], dtype="<f4")
        v = np.ascontiguousarray(state.v[name], dtype="<f4")
        out += struct.pack("<H", len(nb))
        out += nb
        out += struct.pack("<B", m.ndim)
        for d in m.shape:
            out += struct.pack("<I", d)
        out += m.tobytes()
        out += v.tobytes()
    return bytes(out)


def _deserialize_adam(buf):
    from .params import _Reader
    r = _Reader(buf, "adam state")
    state = AdamState()
    state.t, state.lr, state.beta1, state.beta2, state.eps = \
        struct.unpack("<Qdddd", r.take(40))
    count = r.unpack("<I")
    for _ in range(count):
        nlen = r.unpack("<H")
        name = r.take(nlen).decode()
        rank = r.unpack("<B")
        dims = [r.unpack("<I") for _ in range(rank)]
        n = int(np.prod(dims))
        state.m[name] = np.frombuffer(bytes(r.take(4 * n)), dtype="<f4").reshape(dims).copy()
        state.v[name] = np.frombuffer(bytes(r.take(4 * n)), dtype="<f4").reshape(dims).copy()
    return state


def save_checkpoint(ckpt, path):
    out = bytearray()
    out += CKPT_MAGIC
    out += struct.pack("<H", CKPT_VERSION)
    out += ckpt.model_config.digest_bytes()
    out += ckpt.train_digest
    out += struct.pack("<Q", ckpt.iteration)
    canon = ckpt.model_config.canonical().encode()
    out += struct.pack("<H", len(canon))
    out += canon
    sections = []
    for name, store in ckpt.stores.items():
        sections.append((name, 0, serialize_params(store)))
    for name, state in ckpt.adam_states.items():
        sections.append((name, 1, _serialize_adam(state)))
    out += struct.pack("<H", len(sections))
    for name, kind, blob in sections:
        nb = name.encode()
        out += struct.pack("<H", len(nb))
        out += nb
        out += struct.pack("<BQ", kind, len(blob))
        out += blob
    import os
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(bytes(out))
    os.replace(tmp, path)


def load_checkpoint(path, model_config=None):
    from .errors import BadMagicError, BadVersionError, DigestMismatchError, \
        FormatError
    from .params import _Reader
    with open(path, "rb") as f:
        buf = f.read()
    r = _Reader(buf, "checkpoint")
    if r.take(4) != CKPT_MAGIC:
        raise BadMagicError("checkpoint: bad magic (expected GMCK)")
    version = r.unpack("<H")
    if version != CKPT_VERSION:
        raise BadVersionError(f"checkpoint: unsupported version {version}")
    digest = bytes(r.take(32))
    if model_config is not None and digest != model_config.digest_bytes():
        raise DigestMismatchError(
            f"checkpoint digest {digest.hex()} does not match model config "
            f"digest {model_config.digest_hex()}")
    train_digest = bytes(r.take(32))
    iteration = r.unpack("<Q")
    clen = r.unpack("<H")
    canonical = bytes(r.take(clen)).decode()
    if model_config is None:
        model_config = ModelConfig.from_canonical(canonical)
        if model_config.digest_bytes() != digest:
            raise FormatError("checkpoint: embedded config does not match digest")
    ckpt = Checkpoint(model_config=model_config, iteration=iteration,
                      train_digest=train_digest)
    n_sections = r.unpack("<H")
    for _ in range(n_sections):
        nlen = r.unpack("<H")
        name = r.take(nlen).decode()
        kind = r.unpack("<B")
        blen = r.unpack("<Q")
        blob = bytes(r.take(blen))
        if kind == 0:
            ckpt.stores[name] = deserialize_params(blob, model_config.digest_bytes())
        else:
            ckpt.adam_states[name] = _deserialize_adam(blob)
    return ckpt


# ---------------------------------------------------------------------------
# training loops

def _iter_rng(seed, iteration):
    return np.random.Generator(np.random.Philox(key=[seed, iteration]))


def _check_finite(value, iteration):
    if not np.isfinite(value):
        raise CodecError(f"non-finite loss at iteration {iteration}")


def _apply_schedule(states, tcfg, iteration):
    if iteration in tcfg.lr_schedule:
        for st in states:
            st.lr *= 0.5


def train_stage1(model_config, tcfg, images, model=None, loss_log=None,
                 start_iteration=0, adam_states=None):
    """Rate-distortion training of encoder, decoder G1 and entropy model."""
    if not images:
        raise UsageError("empty dataset")
    if model is None:
        model = CodecModel(model_config, seed=tcfg.seed)
    enc, dec, ctx = model.encoder, model.decoder, model.context
    for net in (enc, dec, ctx):
        net.set_requires_grad(True)
    stores = {"encoder": enc.param_store(), "decoder_g1": dec.param_store(),
              "context": ctx.param_store()}
    if adam_states is None:
        adam_states = {name: AdamState(lr=tcfg.lr) for name in stores}
    for it in range(start_iteration, tcfg.iterations):
        _apply_schedule(adam_states.values(), tcfg, it)
        rng = _iter_rng(tcfg.seed, it)
        batch = sample_patches(images, tcfg.patch_size, rng, tcfg.batch_size)
        x = Tensor(batch)
        y = enc(x)
        zn = quantize_noise(y, rng)
        gmm = ctx(zn)
        xhat = dec(zn)
        loss = loss_stage1(x, xhat, zn, gmm, tcfg.lambda_d1)
        _check_finite(loss.item(), it)
        if loss_log is not None:
            n_pix = batch.shape[0] * batch.shape[2] * batch.shape[3]
            r = rate_loss(zn.detach(), gmm[0].detach(), gmm[1].detach(),
                          gmm[2].detach(), n_pix)
            with ag.no_grad():
                d = mse_loss(x, xhat.detach())
            loss_log.append({"iteration": it, "loss": loss.item(),
                             "rate_bpp": r.item(), "mse": d.item()})
        ag.backward(loss)
        for name, store in stores.items():
            adam_step(store, adam_states[name])
    return Checkpoint(model_config=model_config, iteration=tcfg.iterations,
                      train_digest=tcfg.digest_bytes(), stores=stores,
                      adam_states=adam_states)


def train_stage2(model_config, tcfg, images, stage1_ckpt, loss_log=None,
                 disc_seed=None):
    """Adversarial fine-tuning of G2 only; encoder and entropy model frozen.

    G2 starts as a copy of G1. The decoder consumes hard-rounded latents
    (inference-mode quantization) since no gradient flows into the encoder.
    One discriminator step per generator step.
    """
    if not images:
        raise UsageError("empty dataset")
    for needed in ("encoder", "decoder_g1", "context"):
        if needed not in stage1_ckpt.stores:
            raise UsageError(f"stage-1 checkpoint is missing '{needed}' weights")
    model = CodecModel(model_config, seed=tcfg.seed)
    model.encoder.load_params(stage1_ckpt.stores["encoder"])
    model.context.load_params(stage1_ckpt.stores["context"])
    model.decoder.load_params(stage1_ckpt.stores["decoder_g1"])
    g2 = Decoder(model_config, _net_rng(tcfg.seed, 1))
    g2.load_params(stage1_ckpt.stores["decoder_g1"])
    disc = model.make_discriminator(seed=tcfg.seed if disc_seed is None else disc_seed)

    model.encoder.set_requires_grad(False)
    model.context.set_requires_grad(False)
    g2.set_requires_grad(True)
    disc.set_requires_grad(True)
    extractor = tcfg.feature_extractor()

    g2_store = g2.param_store()
    d_store = disc.param_store()
    frozen = list(model.encoder.param_store().items()) + \
        list(model.context.param_store().items())
    adam_g = AdamState(lr=tcfg.lr)
    adam_d = AdamState(lr=tcfg.lr)
    for it in range(tcfg.iterations):
        _apply_schedule((adam_g, adam_d), tcfg, it)
        rng = _iter_rng(tcfg.seed, it)
        batch = sample_patches(images, tcfg.patch_size, rng, tcfg.batch_size)
        x = Tensor(batch)
        with ag.no_grad():
            y = model.encoder(x)
        z = Tensor(round_half_away(y.data).astype(np.float32))

        # discriminator step
        xhat = g2(z)
        xhat_d = xhat.detach()
        d_loss = lsgan_discriminator_loss(disc(x), disc(xhat_d))
        _check_finite(d_loss.item(), it)
        ag.backward(d_loss)
        adam_step(d_store, adam_d)
        g2_store.zero_grad()

        # generator step
        xhat = g2(z)
        fake_maps = disc(xhat)
        g_loss = loss_stage2(x, xhat, fake_maps, extractor,
                             tcfg.lambda_d2, tcfg.lambda_adv, tcfg.lambda_feat)
        _check_finite(g_loss.item(), it)
        with ag.no_grad():
            adv_part = lsgan_generator_loss([Tensor(m.data) for m in fake_maps])
        ag.backward(g_loss)
        for name, t in frozen:
            if t.grad is not None:
                raise CodecError(f"internal invariant violation: gradient reached "
                                 f"frozen parameter '{name}' at iteration {it}")
        adam_step(g2_store, adam_g)
        d_store.zero_grad()
        if loss_log is not None:
            loss_log.append({"iteration": it, "g_loss": g_loss.item(),
                             "d_loss": d_loss.item(), "adv": adv_part.item()})
    stores = {"encoder": model.encoder.param_store(),
              "decoder_g1": model.decoder.param_store(),
              "context": model.context.param_store(),
              "decoder_g2": g2_store,
              "discriminator": d_store}
    adam_states = {"decoder_g2": adam_g, "discriminator": adam_d}
    return Checkpoint(model_config=model_config, iteration=tcfg.iterations,
                      train_digest=tcfg.digest_bytes(), stores=stores,
                      adam_states=adam_states)
