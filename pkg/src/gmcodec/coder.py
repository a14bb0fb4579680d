"""Entropy-coding core: integer-symbol Gaussian-mixture probabilities,
quantized CDF tables, a carry-less 32-bit range coder, the serial
autoregressive latent codec, and the bitstream container.

The bitstream layout (little-endian) is the interop contract:
    magic "GMC1" | version u16 | config digest (32 bytes)
    | original dims u32 x2 (H, W) | padded dims u32 x2 | latent dims u32 x2
    | latent_channels u16 | K u8 | per-channel (z_min i16, z_max i16)
    | payload length u64 | payload bytes
"""

import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .errors import (BadMagicError, BadVersionError, ConfigError, DecodeError,
                     DigestMismatchError, FormatError, TruncatedError)
from .model import GmmField, QuantizedLatents

TOTAL_BITS = 16
TOTAL = 1 << TOTAL_BITS          # frequency total of every CDF table
MAX_ALPHABET = 1 << 15
PMF_FLOOR = 1e-12                # floor used by the differentiable rate path too

BITSTREAM_MAGIC = b"GMC1"
BITSTREAM_VERSION = 1


# ---------------------------------------------------------------------------
# Gaussian mixture probabilities on the integer grid

def _check_mixture(w, sigma):
    w = np.asarray(w, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(w < -1e-9) or abs(float(np.sum(w)) - 1.0) > 1e-5:
        raise ConfigError(f"mixture weights must lie on the simplex, got {w}")
    if np.any(sigma <= 0):
        raise ConfigError("mixture std-devs must be strictly positive")
    return w, sigma


def gmm_integer_pmf(symbol, w, mu, sigma):
    """P(symbol) under the mixture convolved with a unit-width uniform:
    sum_k w_k * (Phi((s+0.5-mu_k)/sigma_k) - Phi((s-0.5-mu_k)/sigma_k)).

    `symbol` may be a scalar or an array; w/mu/sigma are K-vectors.
    """
    w, sigma = _check_mixture(w, sigma)
    mu = np.asarray(mu, dtype=np.float64)
    s = np.asarray(symbol, dtype=np.float64)
    scalar = s.ndim == 0
    s = np.atleast_1d(s)
    upper = ndtr((s[None, :] + 0.5 - mu[:, None]) / sigma[:, None])
    lower = ndtr((s[None, :] - 0.5 - mu[:, None]) / sigma[:, None])
    p = np.maximum((w[:, None] * (upper - lower)).sum(axis=0), 0.0)
    return float(p[0]) if scalar else p


def mixture_cdf(x, w, mu, sigma):
    """Mixture CDF at real points x (vectorized over x)."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    w = np.asarray(w, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    return (w[:, None] * ndtr((x[None, :] - mu[:, None]) / sigma[:, None])).sum(axis=0)


@dataclass
class SymbolDistribution:
    """Quantized CDF over the alphabet [z_min, z_max]; total is exactly 2^16."""
    z_min: int
    z_max: int
    cum: np.ndarray  # uint32, length M+1, strictly increasing, cum[-1] == TOTAL

    def freq(self, symbol):
        j = symbol - self.z_min
        return int(self.cum[j + 1] - self.cum[j])

    def cum_freq(self, symbol):
        return int(self.cum[symbol - self.z_min])

    def find(self, target):
        """Symbol whose cumulative interval contains `target`."""
        j = int(np.searchsorted(self.cum, target, side="right")) - 1
        return self.z_min + j


def build_symbol_distribution(w, mu, sigma, z_min, z_max):
    """Quantize the mixture pmf over [z_min, z_max] to integer frequencies.

    Tail mass outside the bounds is folded into the two edge symbols; every
    symbol keeps frequency >= 1; frequencies sum to exactly 2^16.
    """
    if z_max < z_min:
        raise ConfigError(f"invalid alphabet bounds [{z_min}, {z_max}]")
    m = int(z_max - z_min + 1)
    if m > MAX_ALPHABET:
        raise ConfigError(f"alphabet size {m} exceeds {MAX_ALPHABET}")
    edges = np.arange(z_min, z_max + 2, dtype=np.float64) - 0.5
    cdf = mixture_cdf(edges, w, mu, sigma)
    p = np.maximum(np.diff(cdf), 0.0)
    p[0] += cdf[0]
    p[-1] += max(0.0, 1.0 - cdf[-1])
    freq = np.floor(p * (TOTAL - m)).astype(np.int64) + 1
    deficit = TOTAL - int(freq.sum())
    if deficit < 0:
        raise ConfigError("frequency quantization overflow")  # cannot happen
    if deficit:
        order = np.argsort(-p, kind="stable")
        full, rest = divmod(deficit, m)
        if full:
            freq += full
        freq[order[:rest]] += 1
    cum = np.zeros(m + 1, dtype=np.uint32)
    np.cumsum(freq, out=cum[1:])
    return SymbolDistribution(z_min=int(z_min), z_max=int(z_max), cum=cum)


# ---------------------------------------------------------------------------
# carry-less range coder (32-bit state, byte-wise renormalization)

_TOP = 1 << 24
_BOT = 1 << 16
_MASK = 0xFFFFFFFF


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK
        self.out = bytearray()
        self._done = False

    def encode(self, cum_freq, sym_freq, tot_freq=TOTAL):
        r = self.range // tot_freq
        self.low = (self.low + cum_freq * r) & _MASK
        self.range = r * sym_freq
        low = self.low
        rng = self.range
        while True:
            if (low ^ (low + rng)) < _TOP:
                pass
            elif rng < _BOT:
                rng = -low & (_BOT - 1)
            else:
                break
            self.out.append((low >> 24) & 0xFF)
            low = (low << 8) & _MASK
            rng = (rng << 8) & _MASK
        self.low = low
        self.range = rng

    def finish(self):
        if self._done:
            raise DecodeError("range encoder already finished")
        self._done = True
        low = self.low
        for _ in range(4):
            self.out.append((low >> 24) & 0xFF)
            low = (low << 8) & _MASK
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data):
        self.data = data
        self.pos = 0
        self.low = 0
        self.range = _MASK
        self.code = 0
        for _ in range(4):
            self.code = ((self.code << 8) | self._read_byte()) & _MASK

    def _read_byte(self):
        if self.pos >= len(self.data):
            raise DecodeError("truncated payload: range decoder ran out of bytes")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def decode_target(self, tot_freq=TOTAL):
        self._r = self.range // tot_freq
        target = (self.code - self.low) // self._r
        if target >= tot_freq:
            raise DecodeError("corrupt payload: cumulative target out of range")
        return int(target)

    def consume(self, cum_freq, sym_freq):
        self.low = (self.low + cum_freq * self._r) & _MASK
        self.range = self._r * sym_freq
        low = self.low
        rng = self.range
        code = self.code
        while True:
            if (low ^ (low + rng)) < _TOP:
                pass
            elif rng < _BOT:
                rng = -low & (_BOT - 1)
            else:
                break
            code = ((code << 8) | self._read_byte()) & _MASK
            low = (low << 8) & _MASK
            rng = (rng << 8) & _MASK
        self.low = low
        self.range = rng
        self.code = code


def range_encode(symbols, dists):
    """Encode a symbol sequence, one SymbolDistribution per symbol."""
    enc = RangeEncoder()
    for s, d in zip(symbols, dists):
        enc.encode(d.cum_freq(s), d.freq(s))
    return enc.finish()


def range_decode(data, dist_provider, count):
    """Decode `count` symbols; `dist_provider(i)` yields the i-th distribution
    (must match the encoder's exactly)."""
    if callable(dist_provider):
        provider = dist_provider
    else:
        dists = list(dist_provider)
        provider = lambda i: dists[i]
    dec = RangeDecoder(data)
    out = []
    for i in range(count):
        d = provider(i)
        target = dec.decode_target()
        s = d.find(target)
        dec.consume(d.cum_freq(s), d.freq(s))
        out.append(s)
    return out


# ---------------------------------------------------------------------------
# autoregressive latent codec

def compress_latents(z, context, debug_record=None):
    """Entropy-code a quantized latent grid with the context model.

    Scan order is channel-major within each spatial raster position, so one
    context evaluation per spatial position serves all channels. If
    `debug_record` is a list, the per-element (w, mu, sigma) are appended to
    it (for encoder/decoder agreement checks).
    """
    cc = context.prepare_coding()
    grid = z.z[0].astype(context.dtype)
    c, gh, gw = grid.shape
    enc = RangeEncoder()
    for h in range(gh):
        for w_ in range(gw):
            wk, mu, sigma = cc.params_at(grid, h, w_)
            if debug_record is not None:
                debug_record.append((wk.copy(), mu.copy(), sigma.copy()))
            for ch in range(c):
                try:
                    dist = build_symbol_distribution(
                        wk[:, ch], mu[:, ch], sigma[:, ch],
                        int(z.z_min[ch]), int(z.z_max[ch]))
                    s = int(z.z[0, ch, h, w_])
                    enc.encode(dist.cum_freq(s), dist.freq(s))
                except Exception as e:
                    raise type(e)(f"element (ch={ch}, h={h}, w={w_}): {e}") from e
    return enc.finish()


def decompress_latents(payload, context, shape, z_min, z_max, debug_record=None):
    """Exact mirror of compress_latents; decoded symbols feed back as context.

    shape: (C, H, W) of the latent grid; z_min/z_max: per-channel bounds.
    """
    c, gh, gw = shape
    grid = np.zeros((c, gh, gw), dtype=context.dtype)
    cc = context.prepare_coding()
    dec = RangeDecoder(payload)
    out = np.zeros((1, c, gh, gw), dtype=np.int32)
    for h in range(gh):
        for w_ in range(gw):
            wk, mu, sigma = cc.params_at(grid, h, w_)
            if debug_record is not None:
                debug_record.append((wk.copy(), mu.copy(), sigma.copy()))
            for ch in range(c):
                try:
                    dist = build_symbol_distribution(
                        wk[:, ch], mu[:, ch], sigma[:, ch],
                        int(z_min[ch]), int(z_max[ch]))
                    target = dec.decode_target()
                    s = dist.find(target)
                    dec.consume(dist.cum_freq(s), dist.freq(s))
                except Exception as e:
                    raise type(e)(f"element (ch={ch}, h={h}, w={w_}): {e}") from e
                out[0, ch, h, w_] = s
                grid[ch, h, w_] = s
    return QuantizedLatents(z=out,
                            z_min=np.asarray(z_min, dtype=np.int32),
                            z_max=np.asarray(z_max, dtype=np.int32))


def coder_overhead_bits(n_symbols):
    """Guaranteed overhead bound: 32 flush bits plus 2 bits per symbol."""
    return 32 + 2 * n_symbols


# ---------------------------------------------------------------------------
# rate reporting

@dataclass
class RateReport:
    estimated_bits: float
    actual_bits: int | None
    n_pixels: int

    @property
    def bpp_estimated(self):
        return self.estimated_bits / self.n_pixels

    @property
    def bpp_actual(self):
        if self.actual_bits is None:
            return None
        return self.actual_bits / self.n_pixels

    def with_actual(self, payload_len_bytes):
        return RateReport(estimated_bits=self.estimated_bits,
                          actual_bits=8 * payload_len_bytes,
                          n_pixels=self.n_pixels)


def rate_estimate(z, field, n_pixels):
    """-sum log2 pmf over the grid, as bits and bpp of the original image."""
    zd = z.z if isinstance(z, QuantizedLatents) else np.asarray(z)
    zd = zd.reshape(zd.shape[-3:]) if zd.ndim == 4 else zd
    if not isinstance(field, GmmField):
        raise ConfigError("rate_estimate expects a GmmField")
    k = field.w.shape[0]
    s = zd[None, ...].astype(np.float64)
    upper = ndtr((s + 0.5 - field.mu) / field.sigma)
    lower = ndtr((s - 0.5 - field.mu) / field.sigma)
    p = np.maximum((field.w * (upper - lower)).sum(axis=0), PMF_FLOOR)
    bits = float(-np.sum(np.log2(p)))
    return RateReport(estimated_bits=bits, actual_bits=None, n_pixels=int(n_pixels))


# ---------------------------------------------------------------------------
# bitstream container

@dataclass
class BitstreamHeader:
    config_digest: bytes
    orig_h: int
    orig_w: int
    padded_h: int
    padded_w: int
    latent_h: int
    latent_w: int
    latent_channels: int
    mixtures: int
    z_min: np.ndarray
    z_max: np.ndarray


def pack_container(header, payload):
    out = bytearray()
    out += BITSTREAM_MAGIC
    out += struct.pack("<H", BITSTREAM_VERSION)
    if len(header.config_digest) != 32:
        raise ConfigError("config digest must be 32 bytes")
    out += header.config_digest
    out += struct.pack("<IIIIII", header.orig_h, header.orig_w,
                       header.padded_h, header.padded_w,
                       header.latent_h, header.latent_w)
    out += struct.pack("<HB", header.latent_channels, header.mixtures)
    for ch in range(header.latent_channels):
        out += struct.pack("<hh", int(header.z_min[ch]), int(header.z_max[ch]))
    out += struct.pack("<Q", len(payload))
    out += payload
    return bytes(out)


def unpack_container(buf, expected_digest=None):
    from .params import _Reader
    r = _Reader(buf, "bitstream")
    if r.take(4) != BITSTREAM_MAGIC:
        raise BadMagicError("bitstream: bad magic (expected GMC1)")
    version = r.unpack("<H")
    if version != BITSTREAM_VERSION:
        raise BadVersionError(f"bitstream: unsupported version {version}")
    digest = bytes(r.take(32))
    if expected_digest is not None and digest != expected_digest:
        raise DigestMismatchError(
            f"bitstream digest {digest.hex()} does not match model config "
            f"digest {expected_digest.hex()}")
    oh, ow, ph, pw, lh, lw = struct.unpack("<IIIIII", r.take(24))
    lc = r.unpack("<H")
    k = r.unpack("<B")
    if lc == 0 or lh == 0 or lw == 0:
        raise FormatError("bitstream: zero latent dimensions")
    z_min = np.zeros(lc, dtype=np.int32)
    z_max = np.zeros(lc, dtype=np.int32)
    for ch in range(lc):
        lo, hi = struct.unpack("<hh", r.take(4))
        if hi < lo:
            raise FormatError(f"bitstream: channel {ch} bounds [{lo}, {hi}] invalid")
        z_min[ch], z_max[ch] = lo, hi
    plen = r.unpack("<Q")
    payload = bytes(r.take(plen))
    if r.pos != len(buf):
        raise FormatError(f"bitstream: {len(buf) - r.pos} trailing bytes")
    header = BitstreamHeader(config_digest=digest, orig_h=oh, orig_w=ow,
                             padded_h=ph, padded_w=pw, latent_h=lh, latent_w=lw,
                             latent_channels=lc, mixtures=k,
                             z_min=z_min, z_max=z_max)
    return header, payload
