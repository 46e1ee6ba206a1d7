"""On-disk formats: VTEN raw tensors, binary PPM/PGM images, weight archives.

VTEN: magic ``VTEN``, u8 version (=1), u8 rank, rank x u32 little-endian
extents, then the float32 little-endian row-major payload.

Archives are concatenated VTEN records in one file plus a JSON index sidecar
(``<archive>.json``) mapping tensor names to byte ranges.
"""

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataFormatError

_MAGIC = b"VTEN"
_VERSION = 1


def _vten_bytes(arr):
    arr = np.ascontiguousarray(np.asarray(arr, dtype=np.float32))
    if arr.ndim > 255:
        raise DataFormatError(f"VTEN: rank {arr.ndim} exceeds format limit 255")
    header = _MAGIC + struct.pack("<BB", _VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.astype("<f4").tobytes()


def _parse_vten(buf, path, offset=0):
    if buf[offset:offset + 4] != _MAGIC:
        raise DataFormatError(f"{path}: not a VTEN file (bad magic)")
    version, rank = struct.unpack_from("<BB", buf, offset + 4)
    if version != _VERSION:
        raise DataFormatError(f"{path}: unsupported VTEN version {version}")
    dims = struct.unpack_from(f"<{rank}I", buf, offset + 6)
    start = offset + 6 + 4 * rank
    count = int(np.prod(dims)) if rank else 1
    end = start + 4 * count
    if end > len(buf):
        raise DataFormatError(f"{path}: truncated VTEN payload")
    arr = np.frombuffer(buf[start:end], dtype="<f4").reshape(dims)
    return arr.astype(np.float32, copy=True), end


def write_vten(path, arr):
    Path(path).write_bytes(_vten_bytes(arr))


def read_vten(path):
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise DataFormatError(f"{path}: {e}") from e
    arr, _ = _parse_vten(buf, path)
    return arr


def write_archive(path, tensors):
    """Write named float32 tensors as concatenated VTEN records + JSON index."""
    path = Path(path)
    index = {}
    blob = bytearray()
    for name, arr in tensors.items():
        rec = _vten_bytes(arr)
        index[name] = {"offset": len(blob), "size": len(rec)}
        blob += rec
    path.write_bytes(bytes(blob))
    sidecar = path.with_name(path.name + ".json")
    sidecar.write_text(json.dumps({"version": _VERSION, "tensors": index}, indent=1))


def read_archive(path):
    path = Path(path)
    sidecar = path.with_name(path.name + ".json")
    if not sidecar.exists():
        raise DataFormatError(f"{path}: missing archive index sidecar {sidecar.name}")
    try:
        index = json.loads(sidecar.read_text())
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{sidecar}: corrupt index ({e})") from e
    buf = path.read_bytes()
    out = {}
    for name, rec in index.get("tensors", {}).items():
        arr, _ = _parse_vten(buf, path, offset=rec["offset"])
        out[name] = arr
    return out


def write_image(path, img):
    """Write (3,H,W) as binary PPM (P6) or (1,H,W) as PGM (P5), 8-bit.

    Values are clipped to [0,1] and mapped linearly to 0..255.
    """
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise DataFormatError(f"{path}: image must be (1|3,H,W), got {img.shape}")
    q = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    C, H, W = q.shape
    magic = b"P6" if C == 3 else b"P5"
    header = magic + f"\n{W} {H}\n255\n".encode()
    Path(path).write_bytes(header + q.transpose(1, 2, 0).tobytes())


def read_image(path):
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise DataFormatError(f"{path}: {e}") from e
    if buf[:2] not in (b"P5", b"P6"):
        raise DataFormatError(f"{path}: not a binary PGM/PPM file")
    channels = 3 if buf[:2] == b"P6" else 1
    # header = magic, width, height, maxval as whitespace-separated tokens
    # (comments are not produced by this toolkit and not accepted)
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataFormatError(f"{path}: truncated header")
        tokens.append(buf[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        W, H, maxval = (int(t) for t in tokens)
    except ValueError:
        raise DataFormatError(f"{path}: malformed header fields {tokens}")
    if maxval != 255:
        raise DataFormatError(f"{path}: only 8-bit images supported, maxval={maxval}")
    expect = W * H * channels
    data = np.frombuffer(buf[pos:pos + expect], dtype=np.uint8)
    if data.size != expect:
        raise DataFormatError(f"{path}: payload has {data.size} bytes, expected {expect}")
    img = data.reshape(H, W, channels).transpose(2, 0, 1)
    return (img.astype(np.float32) / np.float32(255.0))
