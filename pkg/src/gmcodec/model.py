"""The five codec networks: encoder E, quantizer Q, decoder G, context
entropy model C, and the multi-scale discriminator D.

All networks are built from a ModelConfig plus a seed, register their
parameters in deterministic order, and expose/load ParamStore views.
"""

import hashlib
from dataclasses import dataclass, fields

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, InputError
from .params import ParamStore

LEAKY_SLOPE = 0.2


@dataclass(frozen=True)
class ModelConfig:
    base_channels: int = 32
    latent_channels: int = 8
    downsample_factor: int = 16
    mixtures: int = 3
    residual_blocks_per_stage: int = 3
    attention_enabled: bool = True
    sigma_floor: float = 0.01
    alphabet_margin: int = 2

    def __post_init__(self):
        if self.mixtures < 1:
            raise ConfigError(f"mixtures must be >= 1, got {self.mixtures}")
        if self.latent_channels < 1:
            raise ConfigError(f"latent_channels must be >= 1, got {self.latent_channels}")
        if self.downsample_factor not in (4, 8, 16):
            raise ConfigError(f"downsample_factor must be 4, 8 or 16, "
                              f"got {self.downsample_factor}")
        if self.sigma_floor <= 0:
            raise ConfigError(f"sigma_floor must be > 0, got {self.sigma_floor}")
        if self.alphabet_margin < 0:
            raise ConfigError("alphabet_margin must be >= 0")

    def canonical(self):
        parts = [f"{f.name}={getattr(self, f.name)}" for f in fields(self)]
        return "gmcodec-config-v1|" + "|".join(parts)

    def digest_bytes(self):
        return hashlib.sha256(self.canonical().encode()).digest()

    def digest_hex(self):
        return self.digest_bytes().hex()

    @staticmethod
    def from_canonical(text):
        prefix = "gmcodec-config-v1|"
        if not text.startswith(prefix):
            raise ConfigError(f"unrecognized config string: '{text[:40]}'")
        kwargs = {}
        casts = {f.name: f.type for f in fields(ModelConfig)}
        for part in text[len(prefix):].split("|"):
            key, _, raw = part.partition("=")
            if key not in casts:
                raise ConfigError(f"unknown config field '{key}'")
            if key == "attention_enabled":
                kwargs[key] = raw == "True"
            elif key == "sigma_floor":
                kwargs[key] = float(raw)
            else:
                kwargs[key] = int(raw)
        return ModelConfig(**kwargs)


@dataclass
class GmmField:
    """Per-element mixture parameters: arrays of shape (K, C, h, w)."""
    w: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray


@dataclass
class QuantizedLatents:
    """Integer symbol grid plus its per-channel alphabet bounds."""
    z: np.ndarray        # int32, (1, C, h, w)
    z_min: np.ndarray    # int32, (C,)
    z_max: np.ndarray    # int32, (C,)

    def __post_init__(self):
        per_ch = self.z.reshape(self.z.shape[1], -1)
        if np.any(per_ch.min(axis=1) < self.z_min) or np.any(per_ch.max(axis=1) > self.z_max):
            raise ConfigError("quantized symbols fall outside their channel bounds")


def round_half_away(y):
    """Round to nearest integer, ties away from zero."""
    return np.sign(y) * np.floor(np.abs(y) + 0.5)


def quantize_noise(y, rng):
    """Training-mode quantizer: add i.i.d. U(-0.5, 0.5) noise (Tensor in/out)."""
    noise = rng.uniform(-0.5, 0.5, size=y.data.shape).astype(y.data.dtype)
    return y + Tensor(noise)


def quantize_round(y, margin=2):
    """Inference-mode quantizer: round and record widened per-channel bounds."""
    yd = y.data if isinstance(y, Tensor) else np.asarray(y)
    z = round_half_away(yd).astype(np.int32)
    per_ch = z.reshape(z.shape[1], -1)
    z_min = per_ch.min(axis=1).astype(np.int32) - margin
    z_max = per_ch.max(axis=1).astype(np.int32) + margin
    return QuantizedLatents(z=z, z_min=z_min, z_max=z_max)


# ---------------------------------------------------------------------------
# parameter-registering building blocks

def _he_init(rng, cout, cin, kh, kw, dtype):
    std = np.sqrt(2.0 / (cin * kh * kw))
    return (rng.standard_normal((cout, cin, kh, kw)) * std).astype(dtype)


class _Net:
    def __init__(self, config, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self._order = []
        self._by_name = {}

    def _reg(self, name, tensor):
        if name in self._by_name:
            raise ConfigError(f"duplicate parameter '{name}'")
        self._order.append(name)
        self._by_name[name] = tensor
        return tensor

    def param_store(self):
        """Live view: tensors are shared with the network."""
        ps = ParamStore(self.config.digest_bytes())
        for n in self._order:
            ps.add(n, self._by_name[n])
        return ps

    def load_params(self, store):
        if store.digest != self.config.digest_bytes():
            raise ConfigError(
                f"param store digest {store.digest.hex()} does not match model "
                f"config digest {self.config.digest_hex()}")
        if store.names() != self._order:
            missing = [n for n in self._order if n not in store]
            raise ConfigError(f"param store names do not match network "
                              f"(first missing: {missing[:1]})")
        for n in self._order:
            src = store[n].data
            dst = self._by_name[n]
            if src.shape != dst.data.shape:
                raise ConfigError(f"parameter '{n}': shape {src.shape} != "
                                  f"{dst.data.shape}")
            dst.data = src.astype(self.dtype)
            dst.grad = None

    def set_requires_grad(self, flag):
        for n in self._order:
            self._by_name[n].requires_grad = flag


class _Conv:
    def __init__(self, net, name, cin, cout, k, rng, stride=1, pad=None):
        self.stride = stride
        self.pad = k // 2 if pad is None else pad
        self.w = net._reg(name + ".weight",
                          Tensor(_he_init(rng, cout, cin, k, k, net.dtype)))
        self.b = net._reg(name + ".bias", Tensor(np.zeros(cout, dtype=net.dtype)))

    def __call__(self, x):
        return ag.conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)


class _ResBlock:
    def __init__(self, net, name, cin, cout, rng, stride=1):
        self.conv1 = _Conv(net, name + ".conv1", cin, cout, 3, rng, stride=stride)
        self.conv2 = _Conv(net, name + ".conv2", cout, cout, 3, rng)
        self.skip = None
        if stride != 1 or cin != cout:
            self.skip = _Conv(net, name + ".skip", cin, cout, 1, rng,
                              stride=stride, pad=0)

    def __call__(self, x):
        h = self.conv2(ag.leaky_relu(self.conv1(x), LEAKY_SLOPE))
        s = self.skip(x) if self.skip is not None else x
        return s + h


class _Attention:
    """Residual gating: out = x + trunk(x) * sigmoid(mask(x))."""

    def __init__(self, net, name, c, rng):
        self.trunk = _ResBlock(net, name + ".trunk", c, c, rng)
        self.mask_rb = _ResBlock(net, name + ".mask_rb", c, c, rng)
        self.mask_conv = _Conv(net, name + ".mask_conv", c, c, 1, rng, pad=0)

    def __call__(self, x):
        gate = ag.sigmoid(self.mask_conv(self.mask_rb(x)))
        return x + ag.mul(self.trunk(x), gate)


class _Upsample:
    """Conv to 4x channels followed by 2x pixel shuffle."""

    def __init__(self, net, name, cin, cout, rng):
        self.conv = _Conv(net, name + ".conv", cin, cout * 4, 3, rng)

    def __call__(self, x):
        return ag.subpixel_upsample(self.conv(x), 2)


# ---------------------------------------------------------------------------
# networks

class Encoder(_Net):
    """Image -> latent code; two plain convs, two groups of residual blocks,
    and two attention modules, downsampling by the configured factor."""

    def __init__(self, config, rng, dtype=np.float32):
        super().__init__(config, dtype)
        c = config.base_channels
        nrb = config.residual_blocks_per_stage
        f = config.downsample_factor
        # stride assignment: conv_in, group1 lead RB, group2 lead RB, conv_out
        s_g2 = 2 if f >= 8 else 1
        s_out = 2 if f == 16 else 1
        if f == 4:
            s_g2, s_out = 1, 1
        elif f == 8:
            s_out = 1
        self.conv_in = _Conv(self, "conv_in", 3, c, 3, rng, stride=2)
        self.group1 = [_ResBlock(self, f"g1.rb{i}", c, c, rng,
                                 stride=2 if i == 0 else 1) for i in range(nrb)]
        self.att1 = _Attention(self, "att1", c, rng) if config.attention_enabled else None
        self.group2 = [_ResBlock(self, f"g2.rb{i}", c, c, rng,
                                 stride=s_g2 if i == 0 else 1) for i in range(nrb)]
        self.att2 = _Attention(self, "att2", c, rng) if config.attention_enabled else None
        self.conv_out = _Conv(self, "conv_out", c, config.latent_channels, 3, rng,
                              stride=s_out)

    def __call__(self, x):
        f = self.config.downsample_factor
        _, ch, h, w = x.data.shape
        if ch != 3:
            raise InputError(f"encoder expects 3 input channels, got {ch}")
        if h % f or w % f:
            raise InputError(
                f"input dims {h}x{w} not divisible by downsample factor {f}; "
                f"pad the image (the CLI pads by replication and records the "
                f"original dims in the bitstream header)")
        t = ag.leaky_relu(self.conv_in(x), LEAKY_SLOPE)
        for rb in self.group1:
            t = rb(t)
        if self.att1 is not None:
            t = self.att1(t)
        for rb in self.group2:
            t = rb(t)
        if self.att2 is not None:
            t = self.att2(t)
        return self.conv_out(t)

    def encode(self, image):
        """Deterministic inference path returning the raw latent array."""
        with ag.no_grad():
            return self(image if isinstance(image, Tensor) else Tensor(image)).data


class Decoder(_Net):
    """Latent code -> image; reverse of the encoder with subpixel upsampling."""

    def __init__(self, config, rng, dtype=np.float32):
        super().__init__(config, dtype)
        c = config.base_channels
        nrb = config.residual_blocks_per_stage
        n_up = int(np.log2(config.downsample_factor))
        self.conv_in = _Conv(self, "conv_in", config.latent_channels, c, 3, rng)
        self.pre_ups = [_Upsample(self, f"pre_up{i}", c, c, rng)
                        for i in range(n_up - 2)]
        self.group1 = [_ResBlock(self, f"g1.rb{i}", c, c, rng) for i in range(nrb)]
        self.att1 = _Attention(self, "att1", c, rng) if config.attention_enabled else None
        self.mid_up = _Upsample(self, "mid_up", c, c, rng)
        self.group2 = [_ResBlock(self, f"g2.rb{i}", c, c, rng) for i in range(nrb)]
        self.att2 = _Attention(self, "att2", c, rng) if config.attention_enabled else None
        self.conv_out = _Conv(self, "conv_out", c, 3 * 4, 3, rng)

    def __call__(self, z):
        t = ag.leaky_relu(self.conv_in(z), LEAKY_SLOPE)
        for up in self.pre_ups:
            t = ag.leaky_relu(up(t), LEAKY_SLOPE)
        for rb in self.group1:
            t = rb(t)
        if self.att1 is not None:
            t = self.att1(t)
        t = ag.leaky_relu(self.mid_up(t), LEAKY_SLOPE)
        for rb in self.group2:
            t = rb(t)
        if self.att2 is not None:
            t = self.att2(t)
        return ag.subpixel_upsample(self.conv_out(t), 2)

    def decode(self, z):
        """Inference path: integer (or real) latents -> image in [0,1]."""
        zd = z.z if isinstance(z, QuantizedLatents) else np.asarray(z)
        with ag.no_grad():
            out = self(Tensor(zd.astype(self.dtype))).data
        return np.clip(out, 0.0, 1.0)


class ContextModel(_Net):
    """Autoregressive entropy model: one raster-masked conv over the symbol
    grid followed by three 1x1 convs emitting GMM weights, means, stds."""

    MASK_K = 5

    def __init__(self, config, rng, dtype=np.float32):
        super().__init__(config, dtype)
        c = config.base_channels
        cl = config.latent_channels
        k3 = 3 * config.mixtures * cl
        self.mask = ag.raster_mask(self.MASK_K, self.MASK_K, dtype=self.dtype)
        self.masked = _Conv(self, "masked", cl, c, self.MASK_K, rng)
        self.p1 = _Conv(self, "p1", c, c, 1, rng, pad=0)
        self.p2 = _Conv(self, "p2", c, c, 1, rng, pad=0)
        self.p3 = _Conv(self, "p3", c, k3, 1, rng, pad=0)

    def __call__(self, z):
        """z: (N, C, h, w) tensor -> (w, mu, sigma) tensors (N, K, C, h, w)."""
        cfg = self.config
        n, cl, h, w = z.data.shape
        if cl != cfg.latent_channels:
            raise ConfigError(f"context model expects {cfg.latent_channels} "
                              f"channels, got {cl}")
        t = ag.masked_conv2d(z, self.masked.w, self.masked.b, self.mask)
        t = ag.leaky_relu(t, LEAKY_SLOPE)
        t = ag.leaky_relu(self.p1(t), LEAKY_SLOPE)
        t = ag.leaky_relu(self.p2(t), LEAKY_SLOPE)
        raw = self.p3(t)  # (N, 3*K*C, h, w)
        k, c = cfg.mixtures, cfg.latent_channels
        raw = ag.reshape(raw, (n, 3, k, c, h, w))
        logits = ag.reshape(ag.narrow(raw, 1, 0, 1), (n, k, c, h, w))
        mu = ag.reshape(ag.narrow(raw, 1, 1, 1), (n, k, c, h, w))
        sraw = ag.reshape(ag.narrow(raw, 1, 2, 1), (n, k, c, h, w))
        weights = ag.softmax(logits, axis=1)
        sigma = ag.softplus(sraw) + Tensor(
            np.full(sraw.data.shape, cfg.sigma_floor, dtype=sraw.data.dtype))
        return weights, mu, sigma

    def field(self, z):
        """Full-grid GmmField (numpy) for a single (1, C, h, w) grid."""
        zd = z.z if isinstance(z, QuantizedLatents) else np.asarray(z)
        with ag.no_grad():
            w, mu, sigma = self(Tensor(zd.astype(self.dtype)))
        return GmmField(w=w.data[0], mu=mu.data[0], sigma=sigma.data[0])

    def prepare_coding(self):
        """Precompute flattened masked weights for the per-position path."""
        k = self.MASK_K
        wm = (self.masked.w.data * self.mask).reshape(self.masked.w.data.shape[0], -1)
        return _CodingContext(self, wm, self.masked.b.data, k)


class _CodingContext:
    """Per-position evaluation of the context model during serial coding.

    Produces bit-identical results on encoder and decoder side because both
    call this same routine; masked (zero) kernel taps contribute exact zeros
    regardless of what sits at not-yet-decoded positions.
    """

    def __init__(self, net, wm, bm, k):
        self.net = net
        self.wm = wm
        self.bm = bm
        self.k = k
        self.half = k // 2

    def params_at(self, grid, h, w):
        """GMM parameters for all channels at spatial position (h, w).

        grid: float array (C, H, W) holding known symbols (future entries
        are ignored by the mask).
        """
        cfg = self.net.config
        c, gh, gw = grid.shape
        hf = self.half
        patch = np.zeros((c, self.k, self.k), dtype=self.net.dtype)
        h0, h1 = max(0, h - hf), min(gh, h + hf + 1)
        w0, w1 = max(0, w - hf), min(gw, w + hf + 1)
        patch[:, h0 - (h - hf):h1 - (h - hf), w0 - (w - hf):w1 - (w - hf)] = \
            grid[:, h0:h1, w0:w1]
        slope = LEAKY_SLOPE

        def lrelu(v):
            return np.where(v >= 0, v, v * slope)

        t = lrelu(self.wm @ patch.reshape(-1) + self.bm)
        net = self.net
        t = lrelu(net.p1.w.data.reshape(len(net.p1.b.data), -1) @ t + net.p1.b.data)
        t = lrelu(net.p2.w.data.reshape(len(net.p2.b.data), -1) @ t + net.p2.b.data)
        raw = net.p3.w.data.reshape(len(net.p3.b.data), -1) @ t + net.p3.b.data
        k, cl = cfg.mixtures, cfg.latent_channels
        raw = raw.reshape(3, k, cl)
        logits, mu, sraw = raw[0], raw[1], raw[2]
        e = np.exp(logits - logits.max(axis=0, keepdims=True))
        weights = e / e.sum(axis=0, keepdims=True)
        sigma = (np.maximum(sraw, 0.0) + np.log1p(np.exp(-np.abs(sraw)))
                 + np.asarray(cfg.sigma_floor, dtype=sraw.dtype))
        return weights, mu, sigma


class Discriminator(_Net):
    """Multi-scale discriminator: three identically shaped sub-discriminators
    applied to the image average-pooled 0, 1 and 2 times."""

    N_SCALES = 3

    def __init__(self, config, rng, dtype=np.float32):
        super().__init__(config, dtype)
        c = config.base_channels
        self.subs = []
        for s in range(self.N_SCALES):
            sub = [
                _Conv(self, f"d{s}.conv1", 3, c, 3, rng, stride=2),
                _Conv(self, f"d{s}.conv2", c, 2 * c, 3, rng, stride=2),
                _Conv(self, f"d{s}.conv3", 2 * c, 1, 3, rng),
            ]
            self.subs.append(sub)

    def __call__(self, x):
        _, _, h, w = x.data.shape
        if h % 4 or w % 4:
            raise InputError(f"discriminator input dims {h}x{w} must be "
                             f"divisible by 4")
        maps = []
        cur = x
        for s, sub in enumerate(self.subs):
            t = cur
            t = ag.leaky_relu(sub[0](t), LEAKY_SLOPE)
            t = ag.leaky_relu(sub[1](t), LEAKY_SLOPE)
            maps.append(sub[2](t))
            if s + 1 < self.N_SCALES:
                cur = ag.avg_pool2(cur)
        return maps


# ---------------------------------------------------------------------------

class CodecModel:
    """Bundle of encoder, decoder and context model sharing one config."""

    def __init__(self, config, seed=0, dtype=np.float32):
        self.config = config
        self.encoder = Encoder(config, _net_rng(seed, 0), dtype)
        self.decoder = Decoder(config, _net_rng(seed, 1), dtype)
        self.context = ContextModel(config, _net_rng(seed, 2), dtype)

    def make_discriminator(self, seed=0, dtype=np.float32):
        return Discriminator(self.config, _net_rng(seed, 3), dtype)


def _net_rng(seed, stream):
    return np.random.Generator(np.random.Philox(key=[seed, stream]))
