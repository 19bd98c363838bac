"""On-disk formats: PPM/PGM images, PFM depth, JSON manifests and CSV reports.

Images are float arrays in [0, 1] (3×H×W for PPM, H×W for PGM).  Depth maps
are H×W float32 in PFM with scale -1.0 (little-endian), rows stored bottom-up.
"""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np


class FormatError(ValueError):
    """Malformed file contents; the message carries the byte offset."""


def _quantize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot write non-finite pixel values")
    if x.min(initial=0.0) < 0.0 or x.max(initial=0.0) > 1.0:
        raise ValueError("pixel values must lie in [0, 1]")
    return np.rint(x * 255.0).astype(np.uint8)


def _encode_pnm(magic: bytes, pixels: np.ndarray, w: int, h: int) -> bytes:
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def encode_ppm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"PPM expects a 3×H×W image, got shape {img.shape}")
    q = _quantize(img).transpose(1, 2, 0)
    return _encode_pnm(b"P6", np.ascontiguousarray(q), img.shape[2], img.shape[1])


def encode_pgm(mask: np.ndarray) -> bytes:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"PGM expects an H×W image, got shape {mask.shape}")
    return _encode_pnm(b"P5", _quantize(mask), mask.shape[1], mask.shape[0])


def _header_tokens(raw: bytes, count: int, start: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated tokens (with # comments) from ``start``."""
    tokens = []
    pos = start
    n = len(raw)
    while len(tokens) < count:
        while pos < n and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < n and raw[pos:pos + 1] == b"#":
            while pos < n and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        if pos >= n:
            raise FormatError(f"truncated header at byte {pos}")
        begin = pos
        while pos < n and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append((raw[begin:pos], begin))
    if pos >= n or not raw[pos:pos + 1].isspace():
        raise FormatError(f"missing whitespace after header at byte {pos}")
    values = []
    for tok, off in tokens:
        if not tok.isdigit():
            raise FormatError(f"expected an integer at byte {off}, found {tok[:16]!r}")
        values.append(int(tok))
    return values, pos + 1


def _decode_pnm(raw: bytes, magic: bytes, channels: int) -> np.ndarray:
    if raw[:2] != magic:
        raise FormatError(f"bad magic at byte 0: expected {magic!r}, found {raw[:2]!r}")
    (w, h, maxval), data_start = _header_tokens(raw, 3, 2)
    if w < 1 or h < 1:
        raise FormatError(f"non-positive image size {w}×{h} in header")
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval} (only 255) in header before byte {data_start}")
    need = w * h * channels
    have = len(raw) - data_start
    if have < need:
        raise FormatError(f"truncated pixel data at byte {len(raw)}: need {need} bytes after "
                          f"offset {data_start}, have {have}")
    if have > need:
        raise FormatError(f"{have - need} trailing bytes after pixel data at byte {data_start + need}")
    pix = np.frombuffer(raw, dtype=np.uint8, count=need, offset=data_start)
    return pix.astype(np.float64) / 255.0, w, h


def decode_ppm(raw: bytes) -> np.ndarray:
    pix, w, h = _decode_pnm(raw, b"P6", 3)
    return pix.reshape(h, w, 3).transpose(2, 0, 1).copy()


def decode_pgm(raw: bytes) -> np.ndarray:
    pix, w, h = _decode_pnm(raw, b"P5", 1)
    return pix.reshape(h, w)


def encode_pfm(depth: np.ndarray) -> bytes:
    depth = np.asarray(depth)
    if depth.ndim != 2:
        raise ValueError(f"PFM expects an H×W map, got shape {depth.shape}")
    if not np.all(np.isfinite(depth)):
        raise ValueError("cannot write non-finite depth values")
    h, w = depth.shape
    body = np.ascontiguousarray(depth[::-1], dtype="<f4").tobytes()
    return f"Pf\n{w} {h}\n-1.0\n".encode("ascii") + body


def decode_pfm(raw: bytes) -> tuple[np.ndarray, float]:
    """Return (depth, scale).  Only grayscale ``Pf`` files are accepted."""
    if raw[:2] != b"Pf" or raw[2:3] not in (b"\n", b" ", b"\r", b"\t"):
        raise FormatError(f"bad magic at byte 0: expected b'Pf', found {raw[:3]!r}")
    lines, pos = [], 3
    for _ in range(2):
        nl = raw.find(b"\n", pos)
        if nl < 0:
            raise FormatError(f"truncated header at byte {pos}")
        lines.append((raw[pos:nl].strip(), pos))
        pos = nl + 1
    (dims, dims_off), (scale_tok, scale_off) = lines
    try:
        w, h = (int(v) for v in dims.split())
    except ValueError:
        raise FormatError(f"bad dimensions at byte {dims_off}: {dims[:32]!r}") from None
    try:
        scale = float(scale_tok)
    except ValueError:
        raise FormatError(f"bad scale at byte {scale_off}: {scale_tok[:32]!r}") from None
    if scale == 0:
        raise FormatError(f"zero scale at byte {scale_off}")
    dtype = "<f4" if scale < 0 else ">f4"
    need = 4 * w * h
    if len(raw) - pos != need:
        raise FormatError(f"expected {need} data bytes from byte {pos}, found {len(raw) - pos}")
    data = np.frombuffer(raw, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    return data[::-1].astype(np.float32), scale


def _write_bytes(path, payload: bytes) -> None:
    try:
        with open(path, "wb") as fh:
            fh.write(payload)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc


def _read_bytes(path) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror}") from exc


def _with_path(path, fn, raw):
    try:
        return fn(raw)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None


def write_ppm(path, img) -> None:
    _write_bytes(path, encode_ppm(img))


def read_ppm(path) -> np.ndarray:
    return _with_path(path, decode_ppm, _read_bytes(path))


def write_pgm(path, mask) -> None:
    _write_bytes(path, encode_pgm(mask))


def read_pgm(path) -> np.ndarray:
    return _with_path(path, decode_pgm, _read_bytes(path))


def write_pfm(path, depth) -> None:
    _write_bytes(path, encode_pfm(depth))


def read_pfm(path) -> np.ndarray:
    return _with_path(path, decode_pfm, _read_bytes(path))[0]


@dataclass
class SampleRecord:
    id: str
    I_tr: str
    I_op: str
    depth: str
    masks: list[str]
    seed: int
    split: str
    meta: dict = field(default_factory=dict)


_RECORD_FIELDS = {"id": str, "I_tr": str, "I_op": str, "depth": str, "masks": list,
                  "seed": int, "split": str}


def record_from_dict(d: dict) -> SampleRecord:
    for name, typ in _RECORD_FIELDS.items():
        if name not in d:
            raise ValueError(f"manifest record missing field {name!r}")
        if not isinstance(d[name], typ) or (typ is int and isinstance(d[name], bool)):
            raise ValueError(f"manifest field {name!r} must be {typ.__name__}, got {d[name]!r}")
    extra = set(d) - set(_RECORD_FIELDS) - {"meta"}
    if extra:
        raise ValueError(f"manifest record has unknown field {sorted(extra)[0]!r}")
    return SampleRecord(**{k: d[k] for k in _RECORD_FIELDS}, meta=d.get("meta", {}))


def dumps_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_manifest(path, split: str, records: list[SampleRecord], extra: dict | None = None) -> None:
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate sample id in manifest")
    doc = {"split": split, "samples": [asdict(r) for r in sorted(records, key=lambda r: r.id)]}
    if extra:
        doc.update(extra)
    with open(path, "w", newline="\n") as fh:
        fh.write(dumps_json(doc))


def read_manifest(path, check_files: bool = True) -> tuple[str, list[SampleRecord]]:
    """Parse a manifest; relative paths are resolved against its directory."""
    with open(path) as fh:
        doc = json.load(fh)
    for key in ("split", "samples"):
        if key not in doc:
            raise ValueError(f"{path}: manifest missing field {key!r}")
    records = [record_from_dict(d) for d in doc["samples"]]
    if check_files:
        base = os.path.dirname(os.fspath(path))
        for r in records:
            for p in [r.I_tr, r.I_op, r.depth, *r.masks]:
                if not os.path.exists(os.path.join(base, p)):
                    raise FileNotFoundError(f"{path}: sample {r.id} references missing file {p}")
    return doc["split"], records


def format_value(v) -> str:
    # repr keeps floats round-trippable and the output byte-stable
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, columns: list[str], rows: list[dict]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        missing = [c for c in columns if c not in r]
        if missing:
            raise ValueError(f"CSV row missing column {missing[0]!r}")
        w.writerow([format_value(r[c]) for c in columns])
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


def read_csv(path, columns: list[str] | None = None) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if columns is not None and reader.fieldnames != columns:
            raise ValueError(f"{path}: header {reader.fieldnames} != expected {columns}")
        return list(reader)
