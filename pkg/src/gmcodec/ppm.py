"""Binary PPM (P6, maxval 255) image I/O.

Images cross the API as (1, 3, H, W) float arrays in [0, 1]; files are
8-bit interleaved RGB. Read/write round trips are byte-exact for valid
files.
"""

import os

import numpy as np

from .errors import FormatError, InputError


def _next_token(buf, pos):
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos] not in b"\r\n":
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise FormatError("ppm: truncated header")
    return buf[start:pos], pos


def read_ppm(path):
    with open(path, "rb") as f:
        buf = f.read()
    magic, pos = _next_token(buf, 0)
    if magic != b"P6":
        raise FormatError(f"ppm: expected P6 magic, got {magic!r}")
    w, pos = _next_token(buf, pos)
    h, pos = _next_token(buf, pos)
    maxval, pos = _next_token(buf, pos)
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as e:
        raise FormatError(f"ppm: bad header field: {e}") from e
    if maxval != 255:
        raise FormatError(f"ppm: only maxval 255 is supported, got {maxval}")
    pos += 1  # single whitespace byte after maxval
    need = w * h * 3
    data = buf[pos:pos + need]
    if len(data) != need:
        raise FormatError(f"ppm: expected {need} pixel bytes, got {len(data)}")
    arr = np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3)
    return arr.transpose(2, 0, 1)[None].astype(np.float32) / 255.0


def write_ppm(path, image):
    img = np.asarray(image)
    if img.ndim == 4:
        img = img[0]
    if img.ndim != 3 or img.shape[0] != 3:
        raise InputError(f"write_ppm expects a (3, H, W) image, got {img.shape}")
    pix = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = pix.shape[1], pix.shape[2]
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(pix.transpose(1, 2, 0).tobytes())
    os.replace(tmp, path)


def pad_to_multiple(image, factor):
    """Edge-replication padding of (1, 3, H, W) up to a multiple of factor."""
    _, _, h, w = image.shape
    ph = (-h) % factor
    pw = (-w) % factor
    if ph == 0 and pw == 0:
        return image
    return np.pad(image, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge")
