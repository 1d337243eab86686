#!/usr/bin/env python3
"""
On-disk formats: TensorFile, Checkpoint, PGM/PPM images

TensorFile (all little-endian):
    b"ATNT" | u16 version=1 | u16 dtype=1 (f64) | u16 rank | rank x u64 extents
    | payload (row-major f64) | u32 CRC32 of payload

Checkpoint:
    b"ATNC" | u16 version=1 | u64 header length | JSON header (sorted keys)
    | one TensorFile blob per parameter, offsets relative to the header end

Every write goes to a temp file in the destination directory and is moved
into place with os.replace.
"""

import json
import os
import struct
import tempfile
import zlib
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np
from tenacity import retry, retry_if_exception_type, stop_after_attempt, wait_exponential

from .tensor import DiffArray
from .utils import AtnBreakError, RetryableError, ensure_directory, get_logger
from .vit import ViTConfig, ViTModel, ViTParams, parameter_group, parameter_shapes

logger = get_logger(__name__)

TENSOR_MAGIC = b"ATNT"
CHECKPOINT_MAGIC = b"ATNC"
FORMAT_VERSION = 1
DTYPE_F64 = 1

_TENSOR_HEAD = struct.Struct("<4sHHH")
_CHECKPOINT_HEAD = struct.Struct("<4sHQ")
_CRC = struct.Struct("<I")


class PersistenceError(AtnBreakError):
    """Base class for file format errors"""

    pass


class BadMagicError(PersistenceError):
    pass


class UnsupportedVersionError(PersistenceError):
    pass


class ChecksumError(PersistenceError):
    pass


class TruncatedFileError(PersistenceError):
    pass


class MalformedImageError(PersistenceError):
    pass


class ConfigMismatchError(PersistenceError):
    pass


class ManifestError(PersistenceError):
    pass


# ---------------------------------------------------------------------------
# Atomic writes
# ---------------------------------------------------------------------------


@retry(
    stop=stop_after_attempt(3),
    wait=wait_exponential(multiplier=0.1, min=0.1, max=2),
    retry=retry_if_exception_type(RetryableError),
    reraise=True,
)
def _replace(src: str, dst: Path) -> None:
    try:
        os.replace(src, dst)
    except OSError as e:
        raise RetryableError(f"Could not move {src} to {dst}: {e}")


def atomic_write_bytes(path, data: bytes) -> Path:
    """Write bytes via temp file + fsync + os.replace"""
    path = Path(path)
    ensure_directory(path.parent if str(path.parent) else ".")
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        _replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _read_bytes(path) -> bytes:
    with open(path, "rb") as f:
        return f.read()


# ---------------------------------------------------------------------------
# TensorFile
# ---------------------------------------------------------------------------


def encode_tensor(array) -> bytes:
    values = array.values if isinstance(array, DiffArray) else array
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise PersistenceError("Refusing to write a tensor with non-finite values")
    payload = np.ascontiguousarray(values).astype("<f8").tobytes()
    head = _TENSOR_HEAD.pack(TENSOR_MAGIC, FORMAT_VERSION, DTYPE_F64, values.ndim)
    extents = struct.pack(f"<{values.ndim}Q", *values.shape)
    return head + extents + payload + _CRC.pack(zlib.crc32(payload) & 0xFFFFFFFF)


def decode_tensor(buf: bytes, offset: int = 0) -> Tuple[np.ndarray, int]:
    """
    Decode one TensorFile blob starting at offset

    Returns:
        Tuple of (array, offset just past the CRC)
    """
    if len(buf) - offset < 4:
        raise TruncatedFileError("File too short for a TensorFile magic")
    if buf[offset:offset + 4] != TENSOR_MAGIC:
        raise BadMagicError(f"Bad TensorFile magic {bytes(buf[offset:offset + 4])!r}")
    if len(buf) - offset < _TENSOR_HEAD.size:
        raise TruncatedFileError("TensorFile header truncated")
    _, version, dtype, rank = _TENSOR_HEAD.unpack_from(buf, offset)
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"TensorFile version {version} not supported")
    if dtype != DTYPE_F64:
        raise UnsupportedVersionError(f"TensorFile dtype tag {dtype} not supported")

    pos = offset + _TENSOR_HEAD.size
    if len(buf) - pos < 8 * rank:
        raise TruncatedFileError("TensorFile extents truncated")
    shape = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank

    n_bytes = 8 * int(np.prod(shape, dtype=np.int64))
    if len(buf) - pos < n_bytes + _CRC.size:
        raise TruncatedFileError(f"TensorFile payload truncated: need {n_bytes} bytes plus CRC")
    payload = bytes(buf[pos:pos + n_bytes])
    (stored_crc,) = _CRC.unpack_from(buf, pos + n_bytes)
    if zlib.crc32(payload) & 0xFFFFFFFF != stored_crc:
        raise ChecksumError("TensorFile payload CRC mismatch")

    array = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
    return array, pos + n_bytes + _CRC.size


def write_tensor(path, array) -> Path:
    return atomic_write_bytes(path, encode_tensor(array))


def read_tensor(path) -> np.ndarray:
    buf = _read_bytes(path)
    array, end = decode_tensor(buf)
    if end != len(buf):
        raise PersistenceError(f"{len(buf) - end} trailing bytes after TensorFile in {path}")
    return array


# ---------------------------------------------------------------------------
# Checkpoint
# ---------------------------------------------------------------------------


def write_checkpoint(
    path,
    params: ViTParams,
    cfg: ViTConfig,
    seed: Optional[int] = None,
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    """
    Write config, manifest and every parameter tensor

    Args:
        path: Destination file
        params: Parameters (validated against cfg)
        cfg: Model config echoed in the header
        seed: Initialisation seed recorded for provenance
        extra: Additional JSON provenance (resolved run config)
    """
    params.validate(cfg)
    blobs = []
    manifest = []
    offset = 0
    for name in parameter_shapes(cfg):
        blob = encode_tensor(params[name])
        manifest.append({
            "name": name,
            "group": parameter_group(name),
            "shape": list(params[name].shape),
            "offset": offset,
            "length": len(blob),
        })
        blobs.append(blob)
        offset += len(blob)

    header = {
        "format_version": FORMAT_VERSION,
        "config": cfg.to_dict(),
        "seed": seed,
        "parameters": manifest,
        "groups": params.groups(),
    }
    if extra is not None:
        header["run_config"] = extra
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")

    data = _CHECKPOINT_HEAD.pack(CHECKPOINT_MAGIC, FORMAT_VERSION, len(header_bytes))
    data += header_bytes + b"".join(blobs)
    atomic_write_bytes(path, data)
    logger.info(f"Checkpoint written to {path} ({len(manifest)} tensors, {len(data)} bytes)")
    return Path(path)


def read_checkpoint_header(buf: bytes) -> Tuple[Dict[str, Any], int]:
    if len(buf) < 4:
        raise TruncatedFileError("File too short for a checkpoint magic")
    if buf[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"Bad checkpoint magic {bytes(buf[:4])!r}")
    if len(buf) < _CHECKPOINT_HEAD.size:
        raise TruncatedFileError("Checkpoint preamble truncated")
    _, version, header_len = _CHECKPOINT_HEAD.unpack_from(buf)
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"Checkpoint version {version} not supported")
    start = _CHECKPOINT_HEAD.size
    if len(buf) - start < header_len:
        raise TruncatedFileError("Checkpoint header truncated")
    try:
        header = json.loads(buf[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ManifestError(f"Checkpoint header is not valid JSON: {e}")
    return header, start + header_len


def _config_diff(a: ViTConfig, b: ViTConfig) -> Dict[str, Tuple[Any, Any]]:
    da, db = a.to_dict(), b.to_dict()
    return {k: (da[k], db[k]) for k in da if da[k] != db[k]}


def read_checkpoint(path, expected: Optional[ViTConfig] = None) -> Tuple[ViTModel, Dict[str, Any]]:
    """
    Load a checkpoint

    Args:
        path: Checkpoint file
        expected: Config the caller needs; any difference is a ConfigMismatchError

    Returns:
        Tuple of (model, header)
    """
    buf = _read_bytes(path)
    header, base = read_checkpoint_header(buf)

    try:
        cfg = ViTConfig.from_dict(header["config"])
        manifest = header["parameters"]
    except KeyError as e:
        raise ManifestError(f"Checkpoint header missing {e}")
    if expected is not None:
        diff = _config_diff(cfg, expected)
        if diff:
            raise ConfigMismatchError(f"Checkpoint config differs from expected: {diff}")

    expected_shapes = parameter_shapes(cfg)
    names = [entry["name"] for entry in manifest]
    if len(set(names)) != len(names):
        raise ManifestError("Checkpoint manifest lists a parameter more than once")
    missing = sorted(set(expected_shapes) - set(names))
    extra = sorted(set(names) - set(expected_shapes))
    if missing or extra:
        raise ManifestError(f"Manifest mismatch: missing={missing} extra={extra}")

    tensors = {}
    for entry in manifest:
        name = entry["name"]
        start = base + int(entry["offset"])
        array, end = decode_tensor(buf, start)
        if end - start != int(entry["length"]):
            raise ManifestError(f"Manifest length of {name} does not match its blob")
        if array.shape != expected_shapes[name] or list(array.shape) != list(entry["shape"]):
            raise ManifestError(
                f"Parameter {name} has shape {array.shape}, expected {expected_shapes[name]}"
            )
        tensors[name] = array

    ordered = {name: tensors[name] for name in expected_shapes}
    return ViTModel(cfg, ViTParams(ordered)), header


# ---------------------------------------------------------------------------
# PGM / PPM
# ---------------------------------------------------------------------------

def read_image(path, expected_shape: Optional[Tuple[int, int, int]] = None) -> np.ndarray:
    """
    Read a binary PGM (P5) or PPM (P6) into [C, H, W] float64 in [0, 1]

    Only maxval 255 is accepted.
    """
    buf = _read_bytes(path)
    magic, width, height, maxval, data_start = _parse_pnm_header(buf)
    channels = 1 if magic == b"P5" else 3
    if maxval != 255:
        raise MalformedImageError(f"Only 8-bit images are supported, maxval={maxval}")

    n_bytes = width * height * channels
    data = buf[data_start:]
    if len(data) != n_bytes:
        raise MalformedImageError(
            f"Expected {n_bytes} pixel bytes for {width}x{height}x{channels}, found {len(data)}"
        )
    pixels = np.frombuffer(data, dtype=np.uint8).reshape(height, width, channels)
    image = pixels.transpose(2, 0, 1).astype(np.float64) / 255.0
    if expected_shape is not None and image.shape != tuple(expected_shape):
        raise MalformedImageError(f"Image {path} has shape {image.shape}, expected {tuple(expected_shape)}")
    return image


def _parse_pnm_header(buf: bytes) -> Tuple[bytes, int, int, int, int]:
    """Returns (magic, width, height, maxval, offset of the pixel data)"""
    if buf[:2] not in (b"P5", b"P6"):
        raise MalformedImageError(f"Not a binary PGM/PPM: magic {bytes(buf[:2])!r}")
    fields = []
    pos = 2
    while len(fields) < 3:
        if pos >= len(buf):
            raise MalformedImageError("Image header truncated")
        ch = buf[pos:pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            end = buf.find(b"\n", pos)
            if end < 0:
                raise MalformedImageError("Image header truncated in a comment")
            pos = end + 1
        elif ch.isdigit():
            end = pos
            while end < len(buf) and buf[end:end + 1].isdigit():
                end += 1
            fields.append(int(buf[pos:end]))
            pos = end
        else:
            raise MalformedImageError(f"Unexpected byte {ch!r} in image header")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise MalformedImageError("Image header must end with one whitespace byte")
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise MalformedImageError(f"Invalid image dimensions {width}x{height}")
    return buf[:2], width, height, maxval, pos + 1


def quantize(image: np.ndarray) -> np.ndarray:
    """[0, 1] floats -> uint8 with round-half-up"""
    image = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return np.floor(image * 255.0 + 0.5).astype(np.uint8)


def write_image(path, image) -> Path:
    """Write [1, H, W] or [H, W] as P5, [3, H, W] as P6"""
    image = np.asarray(image.values if isinstance(image, DiffArray) else image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise MalformedImageError(f"Cannot write image of shape {image.shape}: need 1 or 3 channels")
    channels, height, width = image.shape
    magic = b"P5" if channels == 1 else b"P6"
    pixels = quantize(image).transpose(1, 2, 0).tobytes()
    header = magic + f"\n{width} {height}\n255\n".encode("ascii")
    return atomic_write_bytes(path, header + pixels)
