"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic      4 bytes  b"MBAC"
    version    u32      = 1
    flags      u32      bit 0: CRC32 trailer present
    cfg_hash   32 bytes SHA-256 of the resolved config text
    epoch      u32
    step       u64
    n_params   u32, then n_params tensor records
    n_vel      u32, then n_vel tensor records
    n_extra    u32, then n_extra tensor records (e.g. the data mean)
    rng        u32 length + UTF-8 JSON of the bit generator state
    config     u32 length + UTF-8 resolved config text
    [crc32     u32 over every preceding byte, if flag bit 0]

A tensor record is ``name_len u32, name bytes, dtype u8 (1 = f64, 2 = f32),
rank u8, rank x u32 dims, payload``.
"""

import hashlib
import io
import json
import struct
import warnings
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "MAGIC",
    "VERSION",
    "CheckpointError",
    "BadMagicError",
    "UnsupportedVersionError",
    "TruncatedCheckpointError",
    "ChecksumError",
    "ConfigMismatchError",
    "ConfigMismatchWarning",
    "Checkpoint",
    "config_hash",
    "save",
    "load",
]

MAGIC = b"MBAC"
VERSION = 1
FLAG_CRC = 1
DTYPE_CODES = {np.dtype("<f8"): 1, np.dtype("<f4"): 2}
CODE_DTYPES = {1: np.dtype("<f8"), 2: np.dtype("<f4")}


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


class ConfigMismatchWarning(UserWarning):
    pass


def config_hash(text):
    return hashlib.sha256(text.encode("utf-8")).digest()


@dataclass
class Checkpoint:
    params: OrderedDict
    velocity: OrderedDict = field(default_factory=OrderedDict)
    extra: OrderedDict = field(default_factory=OrderedDict)
    epoch: int = 0
    step: int = 0
    rng_state: dict = None
    config_text: str = ""
    config_hash: bytes = b"\0" * 32

    def rng(self):
        """Rebuild the dropout generator from its saved state."""
        if self.rng_state is None:
            return None
        cls = getattr(np.random, self.rng_state["bit_generator"])
        bitgen = cls()
        bitgen.state = self.rng_state
        return np.random.Generator(bitgen)


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    raise TypeError(type(o))


def _write_tensor(buf, name, arr):
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<")
    if dt not in DTYPE_CODES:
        raise TypeError(f"{name}: unsupported dtype {arr.dtype}; use float64 or float32")
    raw = name.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<BB", DTYPE_CODES[dt], arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def _write_blob(buf, data):
    buf.write(struct.pack("<I", len(data)))
    buf.write(data)


def save(path, params, velocity=None, epoch=0, step=0, rng=None, config_text="", extra=None,
         checksum=True):
    """Write a checkpoint. ``rng`` may be a Generator, a bit generator or a state dict."""
    velocity = velocity or {}
    extra = extra or {}
    if rng is not None and not isinstance(rng, dict):
        rng = (rng.bit_generator if isinstance(rng, np.random.Generator) else rng).state
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, FLAG_CRC if checksum else 0))
    buf.write(config_hash(config_text))
    buf.write(struct.pack("<IQ", epoch, step))
    for group in (params, velocity, extra):
        buf.write(struct.pack("<I", len(group)))
        for name, arr in group.items():
            _write_tensor(buf, name, arr)
    rng_blob = b"" if rng is None else json.dumps(rng, sort_keys=True, default=_json_default).encode()
    _write_blob(buf, rng_blob)
    _write_blob(buf, config_text.encode("utf-8"))
    data = buf.getvalue()
    if checksum:
        data += struct.pack("<I", zlib.crc32(data))
    with open(path, "wb") as fh:
        fh.write(data)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(
                f"checkpoint truncated while reading {what} at byte {self.pos}"
            )
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def tensor(self):
        (n,) = self.unpack("<I", "name length")
        name = self.take(n, "tensor name").decode("utf-8")
        code, rank = self.unpack("<BB", f"{name} header")
        if code not in CODE_DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        dims = self.unpack(f"<{rank}I", f"{name} dims")
        dt = CODE_DTYPES[code]
        count = int(np.prod(dims, dtype=np.int64))
        raw = self.take(count * dt.itemsize, f"{name} payload")
        return name, np.frombuffer(raw, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))

    def group(self, what):
        (n,) = self.unpack("<I", f"{what} count")
        return OrderedDict(self.tensor() for _ in range(n))


def load(path, expected_config=None, strict=False):
    """Read a checkpoint.

    With ``expected_config`` the stored hash is compared against the hash of
    that text; a mismatch warns, or raises :class:`ConfigMismatchError` when
    ``strict``.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}; expected {MAGIC!r}")
    version, flags = r.unpack("<II", "version")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version}")
    if flags & FLAG_CRC:
        if len(data) < r.pos + 4:
            raise TruncatedCheckpointError("checkpoint truncated before checksum")
        (stored,) = struct.unpack("<I", data[-4:])
        r.data = data[:-4]
        if zlib.crc32(r.data) != stored:
            # a cut-off file fails the CRC too; report it as truncation when the body runs short
            probe = _Reader(r.data)
            probe.pos = r.pos
            try:
                _parse_body(probe)
            except TruncatedCheckpointError:
                raise
            except (CheckpointError, ValueError):
                pass
            raise ChecksumError("checkpoint CRC32 mismatch")
    ckpt = _parse_body(r)
    if r.pos != len(r.data):
        raise CheckpointError(f"{len(r.data) - r.pos} unexpected trailing bytes")
    if expected_config is not None and config_hash(expected_config) != ckpt.config_hash:
        msg = "checkpoint config hash does not match the supplied config"
        if strict:
            raise ConfigMismatchError(msg)
        warnings.warn(msg, ConfigMismatchWarning)
    return ckpt


def _parse_body(r):
    h = r.take(32, "config hash")
    epoch, step = r.unpack("<IQ", "counters")
    params = r.group("parameter")
    velocity = r.group("velocity")
    extra = r.group("extra")
    (n,) = r.unpack("<I", "rng length")
    rng_raw = r.take(n, "rng state")
    (n,) = r.unpack("<I", "config length")
    cfg = r.take(n, "config text").decode("utf-8")
    try:
        rng_state = json.loads(rng_raw) if rng_raw else None
    except ValueError as exc:
        raise CheckpointError(f"corrupt rng state: {exc}") from None
    return Checkpoint(params, velocity, extra, epoch, step, rng_state, cfg, h)
