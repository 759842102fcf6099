"""Mono 16 kHz PCM ingestion: WAV files and raw byte streams.

Inputs must already be 16 kHz; there is no resampler. 16-bit samples are
scaled by 1/32768 so -32768 maps to -1.0 exactly, and multi-channel audio
is downmixed by arithmetic mean. Both choices keep ingestion bit-exact
and reversible for 16-bit sources.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterator

import numpy as np

from .errors import (
    EmptyClip,
    IoFailure,
    MalformedWav,
    SampleRateMismatch,
    UnsupportedEncoding,
)

log = logging.getLogger(__name__)

SAMPLE_RATE_HZ = 16000
SAMPLES_PER_MS = SAMPLE_RATE_HZ // 1000
INT16_SCALE = 32768.0

_WAVE_FORMAT_PCM = 1
_WAVE_FORMAT_IEEE_FLOAT = 3


@dataclass
class AudioClip:
    """Mono PCM samples in [-1, 1] at a fixed sample rate."""

    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE_HZ
    source_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz

    def __len__(self) -> int:
        return len(self.samples)


def _parse_riff_chunks(data: bytes) -> dict:
    """Walk the RIFF chunk list and return {chunk_id: payload bytes}."""
    if len(data) < 12:
        raise MalformedWav("file too small for a RIFF header")
    if data[0:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise MalformedWav("not a RIFF/WAVE container")
    chunks = {}
    pos = 12
    while pos + 8 <= len(data):
        cid = data[pos : pos + 4]
        (size,) = struct.unpack_from("<I", data, pos + 4)
        body = data[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise MalformedWav(f"chunk {cid!r} truncated")
        if cid not in chunks:  # first occurrence wins, per RIFF convention
            chunks[cid] = body
        pos += 8 + size + (size & 1)  # chunks are padded to even offsets
    return chunks


def load_wav(path: str | Path) -> AudioClip:
    """Load a WAV file as a mono 16 kHz AudioClip.

    Accepts 16-bit integer PCM (format 1) and 32-bit IEEE float
    (format 3). Raises SampleRateMismatch for anything other than
    16 kHz, UnsupportedEncoding for other codecs or bit depths, and
    MalformedWav for structural problems.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc

    chunks = _parse_riff_chunks(raw)
    if b"fmt " not in chunks:
        raise MalformedWav("missing fmt chunk")
    if b"data" not in chunks:
        raise MalformedWav("missing data chunk")

    fmt = chunks[b"fmt "]
    if len(fmt) < 16:
        raise MalformedWav("fmt chunk too small")
    audio_format, channels, rate, _byte_rate, block_align, bits = struct.unpack_from(
        "<HHIIHH", fmt, 0
    )
    if channels < 1:
        raise MalformedWav("zero channels")

    if audio_format == _WAVE_FORMAT_PCM:
        if bits != 16:
            raise UnsupportedEncoding(f"{bits}-bit PCM not supported (16-bit only)")
        dtype = "<i2"
    elif audio_format == _WAVE_FORMAT_IEEE_FLOAT:
        if bits != 32:
            raise UnsupportedEncoding(f"{bits}-bit float not supported (32-bit only)")
        dtype = "<f4"
    else:
        raise UnsupportedEncoding(f"WAV format code {audio_format} not supported")

    if rate != SAMPLE_RATE_HZ:
        raise SampleRateMismatch(f"{rate} Hz input; engine requires {SAMPLE_RATE_HZ} Hz")

    data = chunks[b"data"]
    frame_size = channels * (bits // 8)
    if block_align not in (0, frame_size):
        raise MalformedWav(f"block align {block_align} != frame size {frame_size}")
    if len(data) % frame_size != 0:
        raise MalformedWav("data chunk is not a whole number of frames")

    samples = np.frombuffer(data, dtype=dtype).astype(np.float64)
    if audio_format == _WAVE_FORMAT_PCM:
        samples /= INT16_SCALE
    else:
        if not np.all(np.isfinite(samples)):
            raise MalformedWav("non-finite float samples")
        samples = np.clip(samples, -1.0, 1.0)

    if channels > 1:
        samples = samples.reshape(-1, channels).mean(axis=1)

    return AudioClip(samples, SAMPLE_RATE_HZ, source_id=path.name)


def write_wav(path: str | Path, clip: AudioClip) -> None:
    """Write a clip as 16-bit PCM mono WAV (quantized by the 1/32768 rule)."""
    if len(clip) == 0:
        raise EmptyClip("refusing to write an empty WAV")
    ints = np.clip(np.round(clip.samples * INT16_SCALE), -32768, 32767).astype("<i2")
    payload = ints.tobytes()
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF",
        36 + len(payload),
        b"WAVE",
        b"fmt ",
        16,
        _WAVE_FORMAT_PCM,
        1,
        clip.sample_rate_hz,
        clip.sample_rate_hz * 2,
        2,
        16,
        b"data",
        len(payload),
    )
    try:
        Path(path).write_bytes(header + payload)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_pcm_stream(
    source: BinaryIO, chunk_ms: int = 100, source_id: str = "stream"
) -> Iterator[AudioClip]:
    """Yield AudioClip chunks from a raw s16le mono 16 kHz byte stream.

    Chunks are chunk_ms long; the final partial chunk is yielded as-is.
    EOF is normal termination. A trailing odd byte cannot form a sample
    and is dropped with a warning.
    """
    if chunk_ms < 10:
        raise ValueError("chunk_ms must be >= 10")
    chunk_bytes = chunk_ms * SAMPLES_PER_MS * 2
    pending = b""
    chunk_index = 0
    while True:
        try:
            block = source.read(chunk_bytes - len(pending))
        except OSError as exc:
            raise IoFailure(f"stream read failed: {exc}") from exc
        at_eof = not block
        pending += block or b""
        if len(pending) >= chunk_bytes or (at_eof and pending):
            emit, pending = pending[:chunk_bytes], pending[chunk_bytes:]
            if at_eof and len(emit) % 2 == 1:
                log.warning("discarding trailing odd byte on %s", source_id)
                emit = emit[:-1]
            if emit:
                samples = np.frombuffer(emit, dtype="<i2").astype(np.float64)
                samples /= INT16_SCALE
                yield AudioClip(samples, SAMPLE_RATE_HZ, source_id=f"{source_id}[{chunk_index}]")
                chunk_index += 1
        if at_eof:
            return
