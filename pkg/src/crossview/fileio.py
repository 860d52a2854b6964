"""On-disk formats: tensor files, PPM images, config text, record logs.

Tensor file layout (bit-exact, little-endian):
    magic "CDGT" | version 0x01 | dtype 0x01 (float32) | rank (1 byte)
    | rank x uint32 extents | row-major float32 payload
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import ContractError, FileFormatError

MAGIC = b"CDGT"
VERSION = 1
DTYPE_F32 = 1


def save_tensor(path, t: Tensor) -> None:
    arr = np.ascontiguousarray(t.data, dtype=np.float32)
    if arr.ndim > 255:
        raise ContractError("save_tensor: rank exceeds format limit")
    header = MAGIC + bytes([VERSION, DTYPE_F32, arr.ndim])
    header += b"".join(struct.pack("<I", n) for n in arr.shape)
    _atomic_write(path, header + arr.astype("<f4").tobytes())


def load_tensor(path) -> Tensor:
    raw = Path(path).read_bytes()
    if len(raw) < 7 or raw[:4] != MAGIC:
        raise FileFormatError(f"{path}: not a tensor file (bad magic)")
    version, dtype, rank = raw[4], raw[5], raw[6]
    if version != VERSION:
        raise FileFormatError(f"{path}: unsupported version {version}")
    if dtype != DTYPE_F32:
        raise FileFormatError(f"{path}: unsupported dtype code {dtype}")
    off = 7
    if len(raw) < off + 4 * rank:
        raise FileFormatError(f"{path}: truncated header")
    shape = struct.unpack(f"<{rank}I", raw[off : off + 4 * rank]) if rank else ()
    off += 4 * rank
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    payload = raw[off:]
    if len(payload) != 4 * count:
        raise FileFormatError(f"{path}: payload is {len(payload)} bytes, expected {4 * count}")
    arr = np.frombuffer(payload, dtype="<f4", count=count).reshape(shape)
    return Tensor(arr.astype(np.float32))


def save_ppm(path, image: np.ndarray) -> None:
    """Write an HxWx3 float image in [0,1] as binary PPM (P6, 8-bit)."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ContractError(f"save_ppm: expected HxWx3 image, got {image.shape}")
    h, w = image.shape[:2]
    pixels = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    _atomic_write(path, f"P6\n{w} {h}\n255\n".encode() + pixels.tobytes())


def load_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P6"):
        raise FileFormatError(f"{path}: not a binary PPM")
    # header: three whitespace-separated fields after P6, comments allowed
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    pos += 1
    w, h, maxval = fields
    if maxval != 255:
        raise FileFormatError(f"{path}: only 8-bit PPM supported")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=h * w * 3, offset=pos)
    return pixels.reshape(h, w, 3).astype(np.float32) / 255.0


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# config text: one `key = value` per line, `#` comments


def parse_config_text(text: str, known_keys) -> dict:
    """Parse `key = value` lines; unknown keys are rejected."""
    known = set(known_keys)
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise FileFormatError(f"line {lineno}: expected `key = value`, got {line!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if key not in known:
            raise FileFormatError(f"line {lineno}: unknown key {key!r}")
        values[key] = value.strip()
    return values


def format_config_text(values: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in values.items())


def coerce_value(text: str, like):
    """Coerce a config string to the type of a default value."""
    if isinstance(like, bool):
        lowered = text.lower()
        if lowered in ("true", "1", "yes"):
            return True
        if lowered in ("false", "0", "no"):
            return False
        raise FileFormatError(f"expected boolean, got {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, tuple):
        parts = [p for p in text.replace("(", " ").replace(")", " ").replace(",", " ").split() if p]
        return tuple(type(e)(p) for e, p in zip(like, parts))
    return text


# ---------------------------------------------------------------------------
# line-delimited record logs (deterministic field order, 6 significant digits)


def fmt(x) -> str:
    """Fixed formatting for numeric output: 6 significant digits."""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.6g}"


class RecordWriter:
    """Append-only line-delimited records of `key=value` pairs.

    Wall-clock fields are diverted to a sibling `<name>.timing` file so the
    record file itself is byte-identical across seeded reruns.
    """

    TIMING_KEYS = ("wall_ms",)

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w")
        self._timing_fh = open(self.path.with_suffix(self.path.suffix + ".timing"), "w")

    def write(self, **fields) -> None:
        timing = {k: fields.pop(k) for k in self.TIMING_KEYS if k in fields}
        line = " ".join(f"{k}={fmt(v) if isinstance(v, (int, float, np.floating, np.integer)) else v}"
                        for k, v in fields.items())
        self._fh.write(line + "\n")
        if timing:
            tline = " ".join(f"{k}={fmt(v)}" for k, v in timing.items())
            self._timing_fh.write(tline + "\n")

    def close(self) -> None:
        self._fh.close()
        self._timing_fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_records(path) -> list[dict]:
    records = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = {}
        for token in line.split():
            k, _, v = token.partition("=")
            rec[k] = v
        records.append(rec)
    return records
