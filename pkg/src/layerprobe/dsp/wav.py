"""Minimal RIFF/WAVE reader and writer (16-bit PCM and 32-bit float)."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from ..corpus_io import _atomic_write_bytes

WAVE_FORMAT_PCM = 1
WAVE_FORMAT_IEEE_FLOAT = 3
WAVE_FORMAT_EXTENSIBLE = 0xFFFE


class WavError(ValueError):
    pass


class UnsupportedEncodingError(WavError):
    pass


class TruncatedChunkError(WavError):
    pass


@dataclass
class AudioBuffer:
    samples: np.ndarray  # float64, mono, nominally in [-1, 1]
    sample_rate_hz: int = 16000

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 1:
            raise WavError("audio must be mono (1-d)")
        if not np.all(np.isfinite(s)):
            raise WavError("audio contains non-finite samples")
        if self.sample_rate_hz <= 0:
            raise WavError("sample rate must be positive")
        self.samples = s

    @property
    def channels(self) -> int:
        return 1

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz

    def slice(self, start_s: float, end_s: float) -> "AudioBuffer":
        a = max(0, int(round(start_s * self.sample_rate_hz)))
        b = min(self.samples.size, int(round(end_s * self.sample_rate_hz)))
        return AudioBuffer(self.samples[a:b], self.sample_rate_hz)


def decode_wav(data: bytes) -> AudioBuffer:
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise UnsupportedEncodingError("not a RIFF/WAVE file")
    pos = 12
    fmt = None
    pcm = None
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        body = data[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise TruncatedChunkError(f"chunk {cid!r} declares {size} bytes, {len(body)} present")
        if cid == b"fmt ":
            if size < 16:
                raise TruncatedChunkError("fmt chunk shorter than 16 bytes")
            fmt = struct.unpack_from("<HHIIHH", body)
            if fmt[0] == WAVE_FORMAT_EXTENSIBLE and size >= 40:
                sub = struct.unpack_from("<H", body, 24)[0]
                fmt = (sub,) + fmt[1:]
        elif cid == b"data":
            pcm = body
        pos += 8 + size + (size & 1)
    if fmt is None:
        raise TruncatedChunkError("missing fmt chunk")
    if pcm is None:
        raise TruncatedChunkError("missing data chunk")
    tag, channels, rate, _, block_align, bits = fmt
    if channels < 1:
        raise UnsupportedEncodingError("zero channels")
    if tag == WAVE_FORMAT_PCM and bits == 16:
        x = np.frombuffer(pcm[:len(pcm) - len(pcm) % 2], dtype="<i2").astype(np.float64) / 32768.0
    elif tag == WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        x = np.frombuffer(pcm[:len(pcm) - len(pcm) % 4], dtype="<f4").astype(np.float64)
    else:
        raise UnsupportedEncodingError(f"format tag {tag} with {bits} bits per sample")
    if x.size % channels:
        raise TruncatedChunkError("data chunk ends mid-frame")
    x = x.reshape(-1, channels).mean(axis=1)
    return AudioBuffer(x, rate)


def read_wav(path: str | os.PathLike) -> AudioBuffer:
    with open(path, "rb") as fh:
        return decode_wav(fh.read())


def encode_wav(samples, sample_rate_hz: int = 16000, encoding: str = "pcm16") -> bytes:
    """``samples`` is ``(n,)`` or ``(n, channels)``; values are clipped for PCM."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    channels = x.shape[1]
    if encoding == "pcm16":
        payload = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2").tobytes()
        tag, bits = WAVE_FORMAT_PCM, 16
    elif encoding == "float32":
        payload = x.astype("<f4").tobytes()
        tag, bits = WAVE_FORMAT_IEEE_FLOAT, 32
    else:
        raise UnsupportedEncodingError(encoding)
    block = channels * bits // 8
    fmt = struct.pack("<HHIIHH", tag, channels, sample_rate_hz, sample_rate_hz * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) & 1:
        body += b"\x00"
    return b"RIFF" + struct.pack("<I", len(body)) + body


def write_wav(path: str | os.PathLike, samples, sample_rate_hz: int = 16000, encoding: str = "pcm16") -> None:
    _atomic_write_bytes(path, encode_wav(samples, sample_rate_hz, encoding))
