"""File formats: TEN1 raw tensors, CKP1 parameter checkpoints, PPM/PGM images,
and the flat key=value config dialect. All multi-byte integers little-endian."""

from __future__ import annotations

import struct

import numpy as np

from .errors import ContractError, FormatError

TEN1_MAGIC = b"TEN1"
CKP1_MAGIC = b"CKP1"


def _need(buf, offset, count, what):
    if offset + count > len(buf):
        raise FormatError(f"truncated {what}: need {count} bytes at offset {offset}")
    return buf[offset : offset + count]


# ---------------------------------------------------------------------------
# TEN1: magic, u8 rank, rank x u32 dims, float32 payload


def ten1_bytes(array):
    arr = np.ascontiguousarray(array, dtype=np.float32)
    if arr.ndim < 1 or arr.ndim > 8:
        raise ContractError(f"TEN1 supports rank 1..8, got {arr.ndim}")
    head = TEN1_MAGIC + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.astype("<f4").tobytes()


def parse_ten1(buf):
    if _need(buf, 0, 4, "TEN1 header") != TEN1_MAGIC:
        raise FormatError("bad TEN1 magic")
    rank = _need(buf, 4, 1, "TEN1 rank")[0]
    if rank < 1 or rank > 8:
        raise FormatError(f"TEN1 rank {rank} out of range")
    dims = struct.unpack(f"<{rank}I", _need(buf, 5, 4 * rank, "TEN1 dims"))
    count = 1
    for d in dims:
        if d == 0:
            raise FormatError("TEN1 zero dimension")
        count *= d
    payload = _need(buf, 5 + 4 * rank, 4 * count, "TEN1 payload")
    if len(buf) != 5 + 4 * rank + 4 * count:
        raise FormatError("TEN1 trailing bytes")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)


def write_ten1(path, array):
    with open(path, "wb") as fh:
        fh.write(ten1_bytes(array))


def read_ten1(path):
    with open(path, "rb") as fh:
        return parse_ten1(fh.read())


# ---------------------------------------------------------------------------
# CKP1: magic, u32 count, then per parameter
#   u16 name length, name utf-8, u8 rank, rank x u32 dims, float32 payload
# Entries are written in sorted name order so checkpoints are byte-reproducible.


def checkpoint_bytes(arrays):
    out = [CKP1_MAGIC, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype=np.float32)
        enc = name.encode("utf-8")
        if len(enc) > 0xFFFF:
            raise ContractError(f"parameter name too long: {name[:32]}...")
        out.append(struct.pack("<H", len(enc)))
        out.append(enc)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.astype("<f4").tobytes())
    return b"".join(out)


def parse_checkpoint(buf):
    if _need(buf, 0, 4, "CKP1 header") != CKP1_MAGIC:
        raise FormatError("bad CKP1 magic")
    (count,) = struct.unpack("<I", _need(buf, 4, 4, "CKP1 count"))
    pos = 8
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", _need(buf, pos, 2, "CKP1 name length"))
        pos += 2
        name = _need(buf, pos, nlen, "CKP1 name").decode("utf-8")
        pos += nlen
        rank = _need(buf, pos, 1, "CKP1 rank")[0]
        pos += 1
        dims = struct.unpack(f"<{rank}I", _need(buf, pos, 4 * rank, "CKP1 dims"))
        pos += 4 * rank
        n = 1
        for d in dims:
            n *= d
        data = _need(buf, pos, 4 * n, f"CKP1 payload for '{name}'")
        pos += 4 * n
        if name in arrays:
            raise FormatError(f"duplicate checkpoint entry '{name}'")
        arrays[name] = np.frombuffer(data, dtype="<f4").reshape(dims).astype(np.float32)
    if pos != len(buf):
        raise FormatError("CKP1 trailing bytes")
    return arrays


def save_checkpoint(path, arrays):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(arrays))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())


# ---------------------------------------------------------------------------
# PPM (P6) / PGM (P5), 8-bit only. Images cross the API as float32 in [0, 1],
# shaped (channels, h, w).


def _read_pnm_header(buf):
    # magic, then 3 decimal fields (w, h, maxval) separated by whitespace;
    # '#' starts a comment running to end of line
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(buf):
            raise FormatError("truncated PNM header")
        ch = buf[pos : pos + 1]
        if ch == b"#":
            while pos < len(buf) and buf[pos : pos + 1] != b"\n":
                pos += 1
        elif ch.isspace():
            pos += 1
        elif ch.isdigit():
            start = pos
            while pos < len(buf) and buf[pos : pos + 1].isdigit():
                pos += 1
            fields.append(int(buf[start:pos]))
        else:
            raise FormatError(f"unexpected byte {ch!r} in PNM header")
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise FormatError("PNM header must end with single whitespace")
    return fields[0], fields[1], fields[2], pos + 1


def parse_image(buf):
    magic = buf[:2]
    if magic == b"P6":
        channels = 3
    elif magic == b"P5":
        channels = 1
    else:
        raise FormatError("not a P6/P5 image")
    w, h, maxval, pos = _read_pnm_header(buf)
    if maxval != 255:
        raise FormatError(f"only 8-bit images supported, maxval={maxval}")
    need = w * h * channels
    raw = _need(buf, pos, need, "PNM pixels")
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, channels)
    return (pixels.transpose(2, 0, 1).astype(np.float32) / 255.0)


def image_bytes(image):
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ContractError(f"image must be (1|3, h, w), got {img.shape}")
    channels, h, w = img.shape
    quant = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    magic = b"P6" if channels == 3 else b"P5"
    header = magic + f"\n{w} {h}\n255\n".encode("ascii")
    return header + quant.transpose(1, 2, 0).tobytes()


def read_image(path):
    with open(path, "rb") as fh:
        return parse_image(fh.read())


def write_image(path, image):
    with open(path, "wb") as fh:
        fh.write(image_bytes(image))


# ---------------------------------------------------------------------------
# flat config text: one "key = value" per line, '#' comments, blank lines ok


def parse_config_text(text):
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"config line {lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key:
            raise FormatError(f"config line {lineno}: empty key")
        if key in values:
            raise FormatError(f"config line {lineno}: duplicate key '{key}'")
        values[key] = value
    return values


def read_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())
