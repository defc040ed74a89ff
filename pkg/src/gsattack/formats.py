"""Binary and text file formats.

* images: binary portable pixmaps, P6 (RGB) or P5 (gray), maxval 255
* manifest: UTF-8 lines ``path<TAB>label<TAB>split``
* ``GSDX1`` descriptor matrix, ``GSTM1`` model checkpoint, ``GSQL1`` query log:
  magic-tagged, little-endian, 64-bit floats
"""

from __future__ import annotations

import hashlib
import io
import struct
from pathlib import Path

import numpy as np

DESCRIPTOR_MAGIC = b"GSDX1"
CHECKPOINT_MAGIC = b"GSTM1"
QUERYLOG_MAGIC = b"GSQL1"


class FormatError(ValueError):
    """Malformed file; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


# ---------------------------------------------------------------- pixmaps


def quantize(x: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid the pixmap codec stores."""
    return np.round(np.clip(x, 0.0, 1.0) * 255.0) / 255.0


def quantize_in_ball(adv: np.ndarray, orig: np.ndarray, epsilon: float) -> np.ndarray:
    """8-bit quantize ``adv`` without leaving the L-inf ball around ``orig``.

    Pixels whose rounded value falls outside the ball move to the nearest
    grid value inside it; if the ball holds no grid value, the original
    pixel is kept.
    """
    hi = np.minimum(1.0, orig + epsilon)
    lo = np.maximum(0.0, orig - epsilon)
    q = quantize(adv)
    q = np.where(q > hi, np.floor(hi * 255.0) / 255.0, q)
    q = np.where(q < lo, np.ceil(lo * 255.0) / 255.0, q)
    outside = (q > hi + 1e-12) | (q < lo - 1e-12)
    return np.where(outside, orig, q)


def encode_image(x: np.ndarray) -> bytes:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[..., None]
    h, w, c = x.shape
    if c not in (1, 3):
        raise ValueError(f"pixmaps hold 1 or 3 channels, got {c}")
    if np.any(~np.isfinite(x)) or x.min() < 0.0 or x.max() > 1.0:
        raise ValueError("pixel values must lie in [0, 1]")
    magic = b"P6" if c == 3 else b"P5"
    body = np.round(x * 255.0).astype(np.uint8).tobytes()
    return magic + b"\n%d %d\n255\n" % (w, h) + body


def decode_image(data: bytes) -> np.ndarray:
    if data[:2] not in (b"P5", b"P6"):
        raise FormatError(f"unsupported pixmap magic {data[:2]!r}", 0)
    channels = 3 if data[:2] == b"P6" else 1
    pos = 2
    fields = []
    while len(fields) < 3:
        # whitespace and comments between header fields
        while pos < len(data) and (data[pos:pos + 1].isspace() or data[pos:pos + 1] == b"#"):
            if data[pos:pos + 1] == b"#":
                end = data.find(b"\n", pos)
                pos = len(data) if end < 0 else end + 1
            else:
                pos += 1
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError("malformed pixmap header: expected an integer", start)
        fields.append(int(data[start:pos]))
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FormatError("malformed pixmap header: missing whitespace after maxval", pos)
    pos += 1
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}", pos - 1)
    need = w * h * channels
    payload = data[pos:pos + need]
    if len(payload) < need:
        raise FormatError(f"truncated pixmap payload: expected {need} bytes, got {len(payload)}",
                          pos + len(payload))
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, channels)
    return arr.astype(np.float64) / 255.0


def save_image(x: np.ndarray, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_image(x))


def load_image(path) -> np.ndarray:
    return decode_image(Path(path).read_bytes())


# ---------------------------------------------------------------- manifest


def write_manifest(records, path) -> None:
    check_manifest(records)
    lines = [f"{r.path}\t{r.label}\t{r.split}\n" for r in records]
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_manifest(path):
    from .datagen import SPLITS, Record

    records = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3 or parts[2] not in SPLITS:
            raise FormatError(f"{path}:{lineno}: bad manifest record {line!r}")
        records.append(Record(parts[0], int(parts[1]), parts[2]))
    check_manifest(records)
    return records


def check_manifest(records) -> None:
    paths = [r.path for r in records]
    if len(set(paths)) != len(paths):
        raise ValueError("manifest paths are not unique")
    src = {r.label for r in records if r.split == "attack-source"}
    tgt = {r.label for r in records if r.split == "attack-target"}
    if src & tgt:
        raise ValueError(f"identities {sorted(src & tgt)} are both attack source and target")


# ---------------------------------------------------------------- descriptors


def export_descriptors(descriptors, path, dim: int | None = None) -> None:
    rows = [np.asarray(d, dtype="<f8") for d in descriptors]
    lengths = {len(r) for r in rows}
    if len(lengths) > 1:
        raise ValueError(f"ragged descriptors: lengths {sorted(lengths)}")
    cols = lengths.pop() if rows else (dim or 0)
    with open(path, "wb") as fh:
        fh.write(DESCRIPTOR_MAGIC + struct.pack("<QQ", len(rows), cols))
        for r in rows:
            fh.write(r.tobytes())


def load_descriptors(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:5] != DESCRIPTOR_MAGIC:
        raise FormatError("not a descriptor file (bad magic)", 0)
    if len(data) < 21:
        raise FormatError("truncated descriptor header", len(data))
    n, d = struct.unpack_from("<QQ", data, 5)
    need = 21 + 8 * n * d
    if len(data) != need:
        raise FormatError(f"descriptor payload size mismatch: expected {need} bytes", len(data))
    return np.frombuffer(data, dtype="<f8", offset=21).astype(np.float64).reshape(n, d)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(params, path) -> None:
    from .model import LAYER_NAMES

    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<3I", *params.input_shape))
    buf.write(struct.pack("<I", len(LAYER_NAMES)))
    for name in LAYER_NAMES:
        arr = params[name]
        raw = name.encode("ascii")
        buf.write(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    for name in LAYER_NAMES:
        buf.write(np.ascontiguousarray(params[name], dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path, expect=None):
    """Read a checkpoint; ``expect`` (a ModelParams) pins the shape table."""
    from .model import LAYER_NAMES, ModelParams, ShapeError

    data = Path(path).read_bytes()
    if data[:5] != CHECKPOINT_MAGIC:
        raise FormatError("not a model checkpoint (bad magic)", 0)
    try:
        pos = 5
        input_shape = struct.unpack_from("<3I", data, pos)
        pos += 12
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        table = []
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + n].decode("ascii")
            pos += n
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            table.append((name, tuple(shape)))
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint shape table: {exc}", pos) from None
    if [t[0] for t in table] != list(LAYER_NAMES):
        raise FormatError("checkpoint layer table does not match the model layout", 17)
    if expect is not None:
        for name, shape in table:
            if tuple(expect[name].shape) != shape:
                raise FormatError(f"layer {name}: checkpoint shape {shape}, expected {expect[name].shape}")
        if tuple(expect.input_shape) != tuple(input_shape):
            raise FormatError(f"input shape {input_shape}, expected {expect.input_shape}")
    arrays = {}
    for name, shape in table:
        size = int(np.prod(shape)) * 8
        if pos + size > len(data):
            raise FormatError(f"truncated payload in layer {name}", len(data))
        arrays[name] = np.frombuffer(data, dtype="<f8", count=size // 8, offset=pos).astype(np.float64).reshape(shape)
        pos += size
    if pos != len(data):
        raise FormatError("trailing bytes after checkpoint payload", pos)
    try:
        return ModelParams(arrays, input_shape)
    except ShapeError as exc:
        raise FormatError(f"inconsistent shape table: {exc}") from None


# ---------------------------------------------------------------- query logs


def image_digest(x: np.ndarray) -> bytes:
    x = np.ascontiguousarray(x, dtype="<f8")
    h = hashlib.sha256(struct.pack(f"<B{x.ndim}I", x.ndim, *x.shape))
    h.update(x.tobytes())
    return h.digest()


KIND_CODES = {"classify": 0, "embed": 1}
KIND_NAMES = {v: k for k, v in KIND_CODES.items()}


def write_query_log(entries, path, truncated: bool = False) -> None:
    """``entries``: iterable of (ordinal, digest, kind, label, values)."""
    entries = list(entries)
    buf = io.BytesIO()
    buf.write(QUERYLOG_MAGIC + struct.pack("<QB", len(entries), int(truncated)))
    for ordinal, digest, kind, label, values in entries:
        values = np.ascontiguousarray(values, dtype="<f8")
        if len(digest) != 32:
            raise ValueError("digest must be 32 bytes")
        buf.write(struct.pack("<Q", ordinal) + digest)
        buf.write(struct.pack("<BqI", KIND_CODES[kind], label, len(values)))
        buf.write(values.tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_query_log(path):
    """Returns (entries, truncated)."""
    data = Path(path).read_bytes()
    if data[:5] != QUERYLOG_MAGIC:
        raise FormatError("not a query log (bad magic)", 0)
    pos = 5
    try:
        count, truncated = struct.unpack_from("<QB", data, pos)
        pos += 9
        entries = []
        for _ in range(count):
            (ordinal,) = struct.unpack_from("<Q", data, pos)
            digest = data[pos + 8:pos + 40]
            pos += 40
            code, label, n = struct.unpack_from("<BqI", data, pos)
            pos += 13
            if pos + 8 * n > len(data):
                raise FormatError("truncated query log entry", len(data))
            values = np.frombuffer(data, dtype="<f8", count=n, offset=pos).astype(np.float64)
            pos += 8 * n
            entries.append((ordinal, digest, KIND_NAMES[code], label, values))
    except (struct.error, KeyError) as exc:
        raise FormatError(f"corrupt query log: {exc}", pos) from None
    if pos != len(data):
        raise FormatError("trailing bytes after query log", pos)
    return entries, bool(truncated)
