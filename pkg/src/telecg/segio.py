"""On-disk formats: waveform containers, manifests, and checkpoints.

Waveform container (records and curated segments share it):

    magic      4 bytes  b"ECGT"
    version    u16 LE
    n_leads    u16 LE
    n_samples  u32 LE   (per lead)
    rate_hz    f32 LE
    data       n_leads * n_samples f32 LE, lead-major

Checkpoints are a self-describing container: a JSON header carrying the
model/run metadata plus a name -> (shape, offset) table, followed by raw
little-endian float32 tensor payloads. Integer state (epoch counters,
queue cursors) rides in the JSON header, so a load/save cycle is bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

WAVEFORM_MAGIC = b"ECGT"
CHECKPOINT_MAGIC = b"ECGC"
FORMAT_VERSION = 1

_WAVE_HEADER = struct.Struct("<4sHHIf")


def write_waveform(path, samples: np.ndarray, sample_rate_hz: float) -> None:
    samples = np.ascontiguousarray(samples, dtype="<f4")
    if samples.ndim != 2:
        raise FormatError(f"samples must be 2-D (leads, samples), got {samples.shape}")
    n_leads, n_samples = samples.shape
    with open(path, "wb") as fh:
        fh.write(_WAVE_HEADER.pack(WAVEFORM_MAGIC, FORMAT_VERSION,
                                   n_leads, n_samples, float(sample_rate_hz)))
        fh.write(samples.tobytes())


def read_waveform(path) -> tuple[np.ndarray, float]:
    """Return (samples float32 (n_leads, n_samples), sample_rate_hz)."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _WAVE_HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, n_leads, n_samples, rate = _WAVE_HEADER.unpack_from(raw)
    if magic != WAVEFORM_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = _WAVE_HEADER.size + 4 * n_leads * n_samples
    if len(raw) != expected:
        raise FormatError(
            f"{path}: payload size mismatch (expected {expected} bytes, "
            f"got {len(raw)})")
    data = np.frombuffer(raw, dtype="<f4", offset=_WAVE_HEADER.size)
    return data.reshape(n_leads, n_samples).copy(), float(rate)


def write_checkpoint(path, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    """meta must be JSON-serializable; tensors are stored as f32 blobs."""
    table = {}
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        table[name] = {"shape": list(arr.shape), "offset": offset,
                       "nbytes": arr.nbytes}
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"meta": meta, "tensors": table}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HI", FORMAT_VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    raw = path.read_bytes()
    fixed = len(CHECKPOINT_MAGIC) + struct.calcsize("<HI")
    if len(raw) < fixed:
        raise FormatError(f"{path}: truncated checkpoint header")
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    version, header_len = struct.unpack_from("<HI", raw, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    try:
        header = json.loads(raw[fixed:fixed + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header ({exc})") from exc
    base = fixed + header_len
    tensors = {}
    for name, info in header["tensors"].items():
        start = base + info["offset"]
        end = start + info["nbytes"]
        if end > len(raw):
            raise FormatError(f"{path}: tensor {name!r} extends past EOF")
        arr = np.frombuffer(raw[start:end], dtype="<f4")
        tensors[name] = arr.reshape(info["shape"]).copy()
    return header["meta"], tensors


def write_jsonl(path, rows, append: bool = False) -> None:
    mode = "a" if append else "w"
    with open(path, mode, encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def append_jsonl(path, row) -> None:
    write_jsonl(path, [row], append=True)


def read_jsonl(path) -> list[dict]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{i + 1}: bad JSON line ({exc})") from exc
    return rows
