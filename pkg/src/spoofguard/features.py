"""Fixed-window spectrogram features.

Two representations feed the countermeasure models:

* log-mel (80 bands) for the logical-access model,
* log-compressed power spectrogram (257 bins) for the physical-access model.

Both start from the same STFT: 512-point FFT, hop 160, periodic Hann
window, no center padding, at 16 kHz. A 3-second (48000-sample) input
therefore yields exactly floor((48000-512)/160)+1 = 297 frames.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .audio_io import SAMPLE_RATE_HZ, AudioClip
from .errors import EmptyClip, InvalidRange, IoFailure, ShapeMismatch, TooShort

WINDOW_SECONDS = 3.0
WINDOW_SAMPLES = int(WINDOW_SECONDS * SAMPLE_RATE_HZ)  # 48000

# Feature kinds. Raw power spectra are nonnegative; the two log kinds are
# floored at ln(LOG_FLOOR) so silence never produces -inf.
KIND_POWER_SPEC = "power_spec"
KIND_LOG_MEL = "log_mel"
KIND_LOG_POWER = "log_power"
LOG_FLOOR = 1e-10

MODE_LA = "LA"
MODE_PA = "PA"


@dataclass(frozen=True)
class StftConfig:
    n_fft: int = 512
    hop: int = 160
    sample_rate_hz: int = SAMPLE_RATE_HZ

    def __post_init__(self):
        if self.n_fft & (self.n_fft - 1):
            raise ValueError("n_fft must be a power of two")
        if not 0 < self.hop <= self.n_fft:
            raise ValueError("hop must satisfy 0 < hop <= n_fft")

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    def frame_count(self, n_samples: int) -> int:
        return (n_samples - self.n_fft) // self.hop + 1


@dataclass
class FeatureMatrix:
    """Time x frequency feature matrix; rows are frames."""

    values: np.ndarray
    kind: str

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_bins(self) -> int:
        return self.values.shape[1]


@dataclass
class MelFilterbank:
    weights: np.ndarray  # (n_mels, n_fft//2+1), peak-normalized triangles
    f_min_hz: float
    f_max_hz: float
    center_freqs_hz: np.ndarray = field(repr=False, default=None)


@lru_cache(maxsize=4)
def _hann_periodic(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def pad_or_trim(clip: AudioClip, target_s: float = WINDOW_SECONDS) -> AudioClip:
    """Force a clip to the fixed window length.

    Longer clips keep their first target_s seconds; shorter clips are
    tiled (cyclically repeated) and cut.
    """
    if len(clip) == 0:
        raise EmptyClip("cannot pad/trim an empty clip")
    target = int(round(target_s * clip.sample_rate_hz))
    x = clip.samples
    if len(x) >= target:
        out = x[:target]
    else:
        reps = -(-target // len(x))  # ceil division
        out = np.tile(x, reps)[:target]
    return AudioClip(out.copy(), clip.sample_rate_hz, clip.source_id)


def stft_power(clip: AudioClip, cfg: StftConfig = StftConfig()) -> FeatureMatrix:
    """One-sided power spectrogram |X_k|^2, no center padding.

    Frame t covers samples [hop*t, hop*t + n_fft) after a Hann window.
    """
    x = clip.samples
    if len(x) < cfg.n_fft:
        raise TooShort(f"need >= {cfg.n_fft} samples, got {len(x)}")
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.n_fft)[:: cfg.hop]
    windowed = frames * _hann_periodic(cfg.n_fft)
    spec = np.fft.rfft(windowed, axis=1)
    power = spec.real**2 + spec.imag**2
    return FeatureMatrix(power, KIND_POWER_SPEC)


def mel_scale(f_hz):
    """HTK mel scale: 2595 * log10(1 + f/700)."""
    return 2595.0 * np.log10(1.0 + np.asarray(f_hz, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def build_mel_filterbank(
    n_mels: int = 80,
    n_fft: int = 512,
    sr: int = SAMPLE_RATE_HZ,
    f_min: float = 0.0,
    f_max: float = 8000.0,
) -> MelFilterbank:
    """Triangular mel filterbank with peak value 1.0 per filter.

    n_mels+2 edge frequencies are spaced equally on the mel scale between
    f_min and f_max; filter m rises over edges (m, m+1) and falls over
    (m+1, m+2), sampled at the FFT bin centers k*sr/n_fft.
    """
    if not (0 <= f_min < f_max <= sr / 2):
        raise InvalidRange(f"need 0 <= f_min < f_max <= {sr / 2}, got [{f_min}, {f_max}]")
    if n_mels < 2:
        raise InvalidRange("n_mels must be >= 2")
    edges_hz = mel_to_hz(np.linspace(mel_scale(f_min), mel_scale(f_max), n_mels + 2))
    bin_freqs = np.arange(n_fft // 2 + 1) * (sr / n_fft)

    lo, center, hi = edges_hz[:-2], edges_hz[1:-1], edges_hz[2:]
    up = (bin_freqs[None, :] - lo[:, None]) / (center - lo)[:, None]
    down = (hi[:, None] - bin_freqs[None, :]) / (hi - center)[:, None]
    weights = np.maximum(0.0, np.minimum(up, down))
    return MelFilterbank(weights, f_min, f_max, center_freqs_hz=center)


def log_mel(power: FeatureMatrix, fb: MelFilterbank) -> FeatureMatrix:
    """ln(max(filterbank-pooled power, floor)) per frame and band."""
    if power.kind != KIND_POWER_SPEC:
        raise ShapeMismatch(f"expected {KIND_POWER_SPEC} input, got {power.kind}")
    if power.n_bins != fb.weights.shape[1]:
        raise ShapeMismatch(
            f"power has {power.n_bins} bins, filterbank expects {fb.weights.shape[1]}"
        )
    pooled = power.values @ fb.weights.T
    return FeatureMatrix(np.log(np.maximum(pooled, LOG_FLOOR)), KIND_LOG_MEL)


_DEFAULT_FILTERBANK: MelFilterbank | None = None


def _default_filterbank() -> MelFilterbank:
    global _DEFAULT_FILTERBANK
    if _DEFAULT_FILTERBANK is None:
        _DEFAULT_FILTERBANK = build_mel_filterbank()
    return _DEFAULT_FILTERBANK


def extract_features(clip: AudioClip, mode: str) -> FeatureMatrix:
    """Full front end: pad/trim to 3 s, STFT, then the mode's compression.

    LA -> 297x80 log-mel; PA -> 297x257 log-compressed power.
    """
    fixed = pad_or_trim(clip)
    power = stft_power(fixed)
    if mode == MODE_LA:
        return log_mel(power, _default_filterbank())
    if mode == MODE_PA:
        return FeatureMatrix(np.log(np.maximum(power.values, LOG_FLOOR)), KIND_LOG_POWER)
    raise ValueError(f"mode must be LA or PA, got {mode!r}")


# --- binary feature dump ("SGF1") -----------------------------------------

_SGF_MAGIC = b"SGF1"
_KIND_CODES = {KIND_POWER_SPEC: 0, KIND_LOG_MEL: 1, KIND_LOG_POWER: 2}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}


def save_feature_dump(fm: FeatureMatrix, path: str | Path) -> None:
    """Write magic, u32 rows, u32 cols, u8 kind, then f32 row-major data."""
    rows, cols = fm.values.shape
    head = _SGF_MAGIC + struct.pack("<IIB", rows, cols, _KIND_CODES[fm.kind])
    body = np.ascontiguousarray(fm.values, dtype="<f4").tobytes()
    try:
        Path(path).write_bytes(head + body)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_feature_dump(path: str | Path) -> FeatureMatrix:
    raw = Path(path).read_bytes()
    if raw[:4] != _SGF_MAGIC:
        raise ShapeMismatch("not an SGF1 feature dump")
    rows, cols, kind_code = struct.unpack_from("<IIB", raw, 4)
    if kind_code not in _KIND_NAMES:
        raise ShapeMismatch(f"unknown feature kind code {kind_code}")
    body = raw[13:]
    if len(body) != rows * cols * 4:
        raise ShapeMismatch("feature dump payload size mismatch")
    values = np.frombuffer(body, dtype="<f4").reshape(rows, cols)
    return FeatureMatrix(values, _KIND_NAMES[kind_code])
