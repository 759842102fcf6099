"""Real-time monitor: ring buffer, window schedule, majority-vote trials.

The stream is cut into consecutive 10-second trials; inside trial k,
eight 3-second windows start at t = 10k + {0..7} (1-second hop). Every
window becomes a segment decision (bonafide iff score >= threshold), and
a trial verdict is the majority vote over its windows with ties going to
spoof. A stream ending mid-trial yields a partial verdict over the
windows actually completed.

Processing is strictly ordered by window start time, so monitoring a
finite stream produces exactly the same verdicts as offline scoring of
the same spans.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Optional

import numpy as np

from .audio_io import SAMPLE_RATE_HZ, AudioClip
from .errors import ModelMissingThreshold, ShapeMismatch
from .features import WINDOW_SAMPLES, extract_features
from .models import ModelWeights, forward_score

TRIAL_SECONDS = 10
WINDOW_SECONDS = 3
HOP_SECONDS = 1
WINDOWS_PER_TRIAL = 8  # starts 0..7 s; the last window ends at the 10 s mark
TRIAL_SAMPLES = TRIAL_SECONDS * SAMPLE_RATE_HZ

RING_CAPACITY = 30 * SAMPLE_RATE_HZ


@dataclass(frozen=True)
class SegmentDecision:
    t_start_s: float
    score: float
    decision: str  # bonafide | spoof


@dataclass(frozen=True)
class TrialVerdict:
    trial_index: int
    t_start_s: float
    votes_spoof: int
    votes_bonafide: int
    decision: str
    partial: bool = False


class RingBuffer:
    """Single-producer/single-consumer sample buffer with overrun events.

    Positions are absolute sample counters. ``read_pos`` is the retention
    watermark: pushing past it overwrites unread samples, which drops the
    oldest data and emits one overrun event per offending push.
    """

    def __init__(self, capacity: int = RING_CAPACITY, on_overrun: Optional[Callable] = None):
        self.capacity = capacity
        self.storage = np.zeros(capacity, dtype=np.float64)
        self.write_pos = 0
        self.read_pos = 0
        self.on_overrun = on_overrun
        self._lock = threading.Lock()
        self._space = threading.Condition(self._lock)

    def push(self, samples: np.ndarray) -> None:
        with self._lock:
            self._push_locked(np.asarray(samples, dtype=np.float64))
            self._space.notify_all()

    def push_blocking(self, samples: np.ndarray, timeout: float = 30.0) -> None:
        """Push with backpressure: waits for space instead of overwriting."""
        samples = np.asarray(samples, dtype=np.float64)
        if len(samples) > self.capacity:
            raise ValueError("chunk larger than ring capacity")
        with self._space:
            while self.write_pos + len(samples) - self.read_pos > self.capacity:
                if not self._space.wait(timeout):
                    raise TimeoutError("ring buffer full and no reader progress")
            self._push_locked(samples)
            self._space.notify_all()

    def _push_locked(self, samples: np.ndarray) -> None:
        n = len(samples)
        overflow = self.write_pos + n - self.read_pos - self.capacity
        if overflow > 0:
            self.read_pos += overflow
            if self.on_overrun is not None:
                self.on_overrun(int(overflow), self.write_pos / SAMPLE_RATE_HZ)
        if n >= self.capacity:
            samples = samples[-self.capacity :]  # only the newest suffix survives
            base = self.write_pos + n - self.capacity
        else:
            base = self.write_pos
        start = base % self.capacity
        first = min(len(samples), self.capacity - start)
        self.storage[start : start + first] = samples[:first]
        if first < len(samples):
            self.storage[: len(samples) - first] = samples[first:]
        self.write_pos += n

    def available(self) -> int:
        with self._lock:
            return self.write_pos - self.read_pos

    def read(self, n: int) -> np.ndarray:
        """Read the next n samples at the watermark and advance it."""
        with self._lock:
            if self.read_pos + n > self.write_pos:
                raise ShapeMismatch("read past the written region")
            out = self._slice_locked(self.read_pos, n)
            self.read_pos += n
            self._space.notify_all()
            return out

    def read_at(self, abs_start: int, n: int) -> np.ndarray:
        """Read [abs_start, abs_start+n) without consuming."""
        with self._lock:
            if abs_start < self.write_pos - self.capacity or abs_start < 0:
                raise ShapeMismatch("window starts before retained data")
            if abs_start + n > self.write_pos:
                raise ShapeMismatch("window extends past written data")
            return self._slice_locked(abs_start, n)

    def advance_to(self, abs_pos: int) -> None:
        with self._lock:
            self.read_pos = max(self.read_pos, min(abs_pos, self.write_pos))
            self._space.notify_all()

    def _slice_locked(self, abs_start: int, n: int) -> np.ndarray:
        start = abs_start % self.capacity
        first = min(n, self.capacity - start)
        out = np.empty(n, dtype=np.float64)
        out[:first] = self.storage[start : start + first]
        if first < n:
            out[first:] = self.storage[: n - first]
        return out


def window_schedule(stream_len_samples: int) -> list[tuple[float, int]]:
    """All (window_start_s, trial_index) completable within the stream."""
    out = []
    trial = 0
    while True:
        base = trial * TRIAL_SECONDS
        any_window = False
        for k in range(WINDOWS_PER_TRIAL):
            start = base + k * HOP_SECONDS
            if (start + WINDOW_SECONDS) * SAMPLE_RATE_HZ <= stream_len_samples:
                out.append((float(start), trial))
                any_window = True
        if not any_window:
            return out
        trial += 1


def _majority(trial_index: int, votes_spoof: int, votes_bonafide: int, partial: bool) -> TrialVerdict:
    decision = "spoof" if votes_spoof >= votes_bonafide else "bonafide"
    return TrialVerdict(
        trial_index,
        float(trial_index * TRIAL_SECONDS),
        votes_spoof,
        votes_bonafide,
        decision,
        partial,
    )


def score_window(model: ModelWeights, threshold: float, samples: np.ndarray, t_start_s: float) -> SegmentDecision:
    clip = AudioClip(samples, SAMPLE_RATE_HZ, source_id=f"window@{t_start_s:g}s")
    feat = extract_features(clip, model.spec.feature_mode)
    score = forward_score(model, feat)
    decision = "bonafide" if score >= threshold else "spoof"
    return SegmentDecision(t_start_s, score, decision)


def score_trial_span(
    model: ModelWeights,
    threshold: float,
    samples: np.ndarray,
    trial_index: int = 0,
    n_windows: int = WINDOWS_PER_TRIAL,
    t_offset_s: float = 0.0,
) -> tuple[list[SegmentDecision], TrialVerdict]:
    """Offline path: 8-window schedule over one in-memory trial span."""
    segments = []
    votes_spoof = votes_bona = 0
    for k in range(n_windows):
        start = k * HOP_SECONDS * SAMPLE_RATE_HZ
        seg = score_window(
            model, threshold, samples[start : start + WINDOW_SAMPLES], t_offset_s + k * HOP_SECONDS
        )
        segments.append(seg)
        if seg.decision == "spoof":
            votes_spoof += 1
        else:
            votes_bona += 1
    verdict = _majority(trial_index, votes_spoof, votes_bona, partial=n_windows < WINDOWS_PER_TRIAL)
    return segments, verdict


def resolve_threshold(model: ModelWeights, threshold: Optional[float]) -> float:
    if threshold is not None:
        return threshold
    if model.calibrated_threshold is None:
        raise ModelMissingThreshold("model has no calibrated threshold; pass one explicitly")
    return model.calibrated_threshold


class _MonitorCore:
    """Window-by-window scoring driven by ring buffer progress."""

    def __init__(self, model: ModelWeights, threshold: float, sink: Callable[[dict], None]):
        self.model = model
        self.threshold = threshold
        self.sink = sink
        self.window_index = 0  # global: trial 10s-aligned, 8 windows per trial
        self.votes_spoof = 0
        self.votes_bona = 0
        self.segments = 0
        self.verdicts = {"spoof": 0, "bonafide": 0}
        self.partials = 0

    def _window_start_s(self, w: int) -> int:
        return (w // WINDOWS_PER_TRIAL) * TRIAL_SECONDS + (w % WINDOWS_PER_TRIAL) * HOP_SECONDS

    def _emit_verdict(self, trial: int, partial: bool) -> None:
        verdict = _majority(trial, self.votes_spoof, self.votes_bona, partial)
        self.verdicts[verdict.decision] += 1
        self.partials += int(partial)
        self.votes_spoof = self.votes_bona = 0
        self.sink(
            {
                "type": "trial",
                "trial_index": verdict.trial_index,
                "votes_spoof": verdict.votes_spoof,
                "votes_bonafide": verdict.votes_bonafide,
                "decision": verdict.decision,
                "partial": verdict.partial,
            }
        )

    def drain(self, rb: RingBuffer) -> None:
        while True:
            w = self.window_index
            start_s = self._window_start_s(w)
            start = start_s * SAMPLE_RATE_HZ
            if start + WINDOW_SAMPLES > rb.write_pos:
                return
            seg = score_window(self.model, self.threshold, rb.read_at(start, WINDOW_SAMPLES), float(start_s))
            self.segments += 1
            if seg.decision == "spoof":
                self.votes_spoof += 1
            else:
                self.votes_bona += 1
            self.sink(
                {
                    "type": "segment",
                    "t_start_s": seg.t_start_s,
                    "score": seg.score,
                    "decision": seg.decision,
                }
            )
            if w % WINDOWS_PER_TRIAL == WINDOWS_PER_TRIAL - 1:
                self._emit_verdict(w // WINDOWS_PER_TRIAL, partial=False)
            self.window_index += 1
            rb.advance_to(self._window_start_s(self.window_index) * SAMPLE_RATE_HZ)

    def finish(self) -> None:
        k = self.window_index % WINDOWS_PER_TRIAL
        if k:
            self._emit_verdict(self.window_index // WINDOWS_PER_TRIAL, partial=True)
        self.sink(
            {
                "type": "summary",
                "trials_total": self.verdicts["spoof"] + self.verdicts["bonafide"],
                "trials_spoof": self.verdicts["spoof"],
                "trials_bonafide": self.verdicts["bonafide"],
                "partial_trials": self.partials,
                "segments_total": self.segments,
            }
        )


def run_monitor(
    source: Iterable[AudioClip],
    model: ModelWeights,
    threshold: Optional[float] = None,
    sink: Callable[[dict], None] = lambda event: None,
    threaded: bool = False,
    ring_capacity: int = RING_CAPACITY,
) -> None:
    """Consume a chunked PCM source and emit segment/trial/summary events.

    With ``threaded=True`` the source is drained by a producer thread that
    blocks when the ring is full (no data loss on file-backed sources);
    the scoring loop stays on the calling thread either way, so event
    order and content are identical.
    """
    thr = resolve_threshold(model, threshold)
    core = _MonitorCore(model, thr, sink)
    rb = RingBuffer(
        ring_capacity,
        on_overrun=lambda dropped, t_s: sink(
            {"type": "overrun", "dropped_samples": dropped, "t_s": t_s}
        ),
    )
    if not threaded:
        for chunk in source:
            rb.push(chunk.samples)
            core.drain(rb)
    else:
        done = threading.Event()

        def produce():
            try:
                for chunk in source:
                    rb.push_blocking(chunk.samples)
            finally:
                done.set()

        producer = threading.Thread(target=produce, name="monitor-producer", daemon=True)
        producer.start()
        while not done.is_set() or rb.available() > 0:
            core.drain(rb)
            if not done.is_set():
                done.wait(0.005)
            elif rb.available() == 0:
                break
        producer.join()
        core.drain(rb)
    core.drain(rb)
    core.finish()
