"""File formats: WAV, MCF1 feature dumps, uint16 label files, atomic writes."""

from __future__ import annotations

import json
import os
import struct
import tempfile
import wave
from pathlib import Path

import numpy as np

MCF_MAGIC = b"MCF1"


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        # mkstemp creates 0600 files; use ordinary permissions for outputs
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path, obj):
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_wav(path, samples: np.ndarray, sample_rate: int, peak: float | None = None) -> float:
    """Write (M, N) or (N,) float samples as 16-bit PCM; returns the scale applied.

    Samples are divided by ``peak`` (default: the absolute maximum, with headroom).
    """
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if not 1 <= x.shape[0] <= 8:
        raise ValueError("WAV output supports 1..8 channels")
    if peak is None:
        peak = float(np.max(np.abs(x))) * 1.05 or 1.0
    pcm = np.clip(np.round(x / peak * 32767.0), -32768, 32767).astype("<i2")
    import io as _io

    buf = _io.BytesIO()
    with wave.open(buf, "wb") as wf:
        wf.setnchannels(x.shape[0])
        wf.setsampwidth(2)
        wf.setframerate(int(sample_rate))
        wf.writeframes(pcm.T.tobytes())
    atomic_write_bytes(path, buf.getvalue())
    return peak


def read_wav(path, expected_rate: int | None = None) -> tuple[np.ndarray, int]:
    """Read 16-bit PCM WAV as float (M, N) in [-1, 1)."""
    with wave.open(str(path), "rb") as wf:
        if wf.getsampwidth() != 2:
            raise ValueError(f"{path}: only 16-bit PCM is supported")
        channels = wf.getnchannels()
        rate = wf.getframerate()
        raw = wf.readframes(wf.getnframes())
    if not 1 <= channels <= 8:
        raise ValueError(f"{path}: unsupported channel count {channels}")
    if expected_rate is not None and rate != expected_rate:
        raise ValueError(f"{path}: sample rate {rate} Hz does not match configured {expected_rate} Hz")
    data = np.frombuffer(raw, dtype="<i2").reshape(-1, channels).T.astype(np.float64) / 32768.0
    return data, rate


def write_features(path, array: np.ndarray):
    """MCF1 dump: magic, uint32 ndim, uint32 dims, then row-major float32 (all little-endian)."""
    a = np.ascontiguousarray(array, dtype="<f4")
    header = MCF_MAGIC + struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape)
    atomic_write_bytes(path, header + a.tobytes())


def read_features(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MCF_MAGIC:
        raise ValueError(f"{path}: not an MCF1 feature file")
    (ndim,) = struct.unpack_from("<I", blob, 4)
    dims = struct.unpack_from(f"<{ndim}I", blob, 8)
    offset = 8 + 4 * ndim
    count = int(np.prod(dims)) if dims else 1
    payload = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
    if payload.size != count:
        raise ValueError(f"{path}: truncated payload")
    return payload.reshape(dims).astype(np.float32)


def write_labels(path, labels: np.ndarray):
    lab = np.asarray(labels)
    if lab.size and (lab.min() < 0 or lab.max() > 0xFFFF):
        raise ValueError("labels must fit in uint16")
    atomic_write_bytes(path, lab.astype("<u2").tobytes())


def read_labels(path) -> np.ndarray:
    return np.fromfile(path, dtype="<u2").astype(np.int64)


def write_jsonl(path, records):
    atomic_write_text(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def read_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
