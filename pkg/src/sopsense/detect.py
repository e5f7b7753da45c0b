"""
Anomaly detection on band-energy features.

A :class:`BaselineModel` holds a per-band median and normalized MAD fitted
on quiet data.  Frames are scored as robust z-values, and runs of high
scores are turned into alarms by a hysteresis state machine:

* a run opens when ``confirm_frames`` consecutive frames score
  ``>= enter_z``; its onset is the first of those frames;
* it continues while the score stays ``>= exit_z`` and closes at the first
  frame below (or at the end of a valid segment);
* a run dominated by the ``break_band`` (largest summed z) whose span is
  followed by loss of signal within ``break_los_window_s`` is a ``break``;
  otherwise runs shorter than ``sustained_min_s`` are
  ``precursor_impulsive`` and longer ones ``precursor_sustained``.

Loss of signal is detected on the SOP series itself (:func:`detect_los`).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np

from .sop import SopSeries
from .spectral import BandFeatures

MAD_SCALE = 1.4826
MIN_TRAINING_FRAMES = 100

PRECURSOR_IMPULSIVE = "precursor_impulsive"
PRECURSOR_SUSTAINED = "precursor_sustained"
BREAK = "break"
LOSS_OF_SIGNAL = "loss_of_signal"
CLASSES = (PRECURSOR_IMPULSIVE, PRECURSOR_SUSTAINED, BREAK, LOSS_OF_SIGNAL)


@dataclass(frozen=True)
class DetectConfig:
    enter_z: float = 6.0
    exit_z: float = 4.0
    confirm_frames: int = 2
    impulsive_max_s: float = 2.0
    sustained_min_s: float = 10.0
    break_band: str = "high"
    break_los_window_s: float = 5.0
    los_hold_s: float = 0.1
    los_drop_db: float = 20.0
    los_ref_window_s: float = 10.0
    min_scale_db: float = 0.0
    # frames this soon after a valid segment starts are not scored
    settle_s: float = 2.0

    def __post_init__(self):
        if self.exit_z > self.enter_z:
            raise ValueError("exit_z must not exceed enter_z")
        if self.confirm_frames < 1:
            raise ValueError("confirm_frames must be >= 1")


@dataclass(frozen=True)
class Alarm:
    t_s: float
    kind: str
    score: float
    band: str
    run_length_s: float


class BaselineError(ValueError):
    """The training features cannot support a baseline model."""


@dataclass(frozen=True)
class BaselineModel:
    bands: tuple[str, ...]
    location_db: tuple[float, ...]
    scale_db: tuple[float, ...]
    training_span_s: float
    frame_hop_s: float
    n_frames: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "BaselineModel":
        d = json.loads(text)
        return cls(
            tuple(d["bands"]),
            tuple(float(v) for v in d["location_db"]),
            tuple(float(v) for v in d["scale_db"]),
            float(d["training_span_s"]),
            float(d["frame_hop_s"]),
            int(d["n_frames"]),
        )


def fit_baseline(features: BandFeatures, min_scale_db: float = 0.0, frame_hop_s: float | None = None) -> BaselineModel:
    """Per-band median and ``1.4826 * MAD`` of the training frames.

    ``min_scale_db`` floors the scale; with the default of 0 a band whose
    MAD is zero (constant energy) is an error.
    """
    e = np.asarray(features.energy_db, dtype=float)
    n = len(e)
    if n < MIN_TRAINING_FRAMES:
        raise BaselineError(f"need at least {MIN_TRAINING_FRAMES} training frames, got {n}")
    if not np.all(np.isfinite(e)):
        raise BaselineError("training features contain non-finite values")
    loc = np.median(e, axis=0)
    scale = MAD_SCALE * np.median(np.abs(e - loc), axis=0)
    scale = np.maximum(scale, min_scale_db)
    for name, s in zip(features.bands, scale):
        if not s > 0:
            raise BaselineError(
                f"band {name!r} has zero median absolute deviation; configure min_scale_db > 0 to floor the scale"
            )
    t = np.asarray(features.t_s, dtype=float)
    hop = frame_hop_s if frame_hop_s is not None else (float(np.median(np.diff(t))) if n > 1 else 0.0)
    return BaselineModel(
        tuple(features.bands),
        tuple(float(v) for v in loc),
        tuple(float(v) for v in scale),
        float(t[-1] - t[0] + hop),
        hop,
        n,
    )


def score_stream(features: BandFeatures, model: BaselineModel) -> np.ndarray:
    """Robust z per frame and band, shape ``(frames, bands)``; frame score is the row max."""
    if tuple(features.bands) != tuple(model.bands):
        raise ValueError(f"feature bands {features.bands} do not match model bands {model.bands}")
    return (np.asarray(features.energy_db) - np.asarray(model.location_db)) / np.asarray(model.scale_db)


# ----------------------------------------------------------------------------
# run classification
# ----------------------------------------------------------------------------


@dataclass
class _Run:
    onset: float
    last: float
    peak: float
    zsum: np.ndarray


class EventClassifier:
    """Streaming hysteresis classifier; :func:`classify_events` is its batch form.

    Feed frames with :meth:`push`, signal segment boundaries with
    :meth:`end_segment`, report loss of signal with :meth:`mark_los` and call
    :meth:`finish` at the end.  Alarms are returned as soon as they are final.
    """

    def __init__(self, bands: Iterable[str], hop_s: float, cfg: DetectConfig = DetectConfig()):
        self.bands = tuple(bands)
        self.hop_s = float(hop_s)
        self.cfg = cfg
        self._break_idx = self.bands.index(cfg.break_band) if cfg.break_band in self.bands else None
        self._candidate: tuple[float, float, np.ndarray] | None = None
        self._streak = 0
        self._streak_start: float | None = None
        self._streak_peak = -math.inf
        self._streak_zsum = np.zeros(len(self.bands))
        self._run: _Run | None = None
        # closed runs that might still become a break
        self._waiting: list[_Run] = []
        self._los: float | None = None
        self._last_t = -math.inf

    def _length(self, run: _Run) -> float:
        return run.last - run.onset + self.hop_s

    def _band(self, run: _Run) -> str:
        return self.bands[int(np.argmax(run.zsum))]

    def _high_dominated(self, run: _Run) -> bool:
        return self._break_idx is not None and int(np.argmax(run.zsum)) == self._break_idx

    def _precursor(self, run: _Run) -> Alarm:
        length = self._length(run)
        kind = PRECURSOR_SUSTAINED if length >= self.cfg.sustained_min_s else PRECURSOR_IMPULSIVE
        return Alarm(run.onset, kind, float(run.peak), self._band(run), length)

    def _close(self, run: _Run) -> list[Alarm]:
        if self._high_dominated(run):
            if self._los is not None:
                return [self._resolve(run)]
            self._waiting.append(run)
            return []
        return [self._precursor(run)]

    def _resolve(self, run: _Run) -> Alarm:
        """Final alarm for a high-band run given what is known about LOS."""
        los = self._los
        if los is not None and run.onset <= los <= run.last + self.cfg.break_los_window_s:
            return Alarm(run.onset, BREAK, float(run.peak), self._band(run), self._length(run))
        return self._precursor(run)

    def _expire(self, now: float) -> list[Alarm]:
        out = []
        keep = []
        for run in self._waiting:
            if now > run.last + self.cfg.break_los_window_s:
                out.append(self._resolve(run))
            else:
                keep.append(run)
        self._waiting = keep
        return out

    def push(self, t_s: np.ndarray, z: np.ndarray) -> list[Alarm]:
        """Consume frames (times and per-band z, shape ``(n, bands)``)."""
        t_s = np.asarray(t_s, dtype=float)
        z = np.asarray(z, dtype=float).reshape(len(t_s), len(self.bands))
        cfg = self.cfg
        out: list[Alarm] = []
        for t, row in zip(t_s, z):
            if t <= self._last_t:
                raise ValueError("frame times must increase")
            self._last_t = t
            out.extend(self._expire(t))
            score = float(row.max())
            if self._run is not None:
                if score >= cfg.exit_z:
                    self._run.last = t
                    self._run.peak = max(self._run.peak, score)
                    self._run.zsum = self._run.zsum + row
                else:
                    out.extend(self._close(self._run))
                    self._run = None
                continue
            if score >= cfg.enter_z:
                if self._streak == 0:
                    self._streak_start = t
                    self._streak_peak = -math.inf
                    self._streak_zsum = np.zeros(len(self.bands))
                self._streak += 1
                self._streak_peak = max(self._streak_peak, score)
                self._streak_zsum = self._streak_zsum + row
                if self._streak >= cfg.confirm_frames:
                    self._run = _Run(self._streak_start, t, self._streak_peak, self._streak_zsum)
                    self._streak = 0
            else:
                self._streak = 0
        return out

    def end_segment(self) -> list[Alarm]:
        """A gap in valid data: close any open run and drop partial confirmations."""
        self._streak = 0
        out = []
        if self._run is not None:
            out.extend(self._close(self._run))
            self._run = None
        return out

    def mark_los(self, t_s: float) -> list[Alarm]:
        """Record loss of signal; emits the LOS alarm plus any runs it resolves."""
        out = []
        if self._los is None:
            self._los = float(t_s)
            out.append(Alarm(float(t_s), LOSS_OF_SIGNAL, 0.0, "", 0.0))
            waiting, self._waiting = self._waiting, []
            out.extend(self._resolve(r) for r in waiting)
        return out

    def finish(self) -> list[Alarm]:
        out = self.end_segment()
        out.extend(self._resolve(r) for r in self._waiting)
        self._waiting = []
        return out


def sort_alarms(alarms: Iterable[Alarm]) -> list[Alarm]:
    order = {k: i for i, k in enumerate(CLASSES)}
    return sorted(alarms, key=lambda a: (a.t_s, order.get(a.kind, 99)))


class AlarmStream:
    """Chunked driver for :class:`EventClassifier` with segment labels and LOS.

    Feed ``(t_s, z, segment)`` chunks with :meth:`push` and call
    :meth:`finish` once.  A change of segment label closes any open run; the
    loss-of-signal alarm (``los_t_s``, if known) is placed before the first
    frame later than it.  The alarms do not depend on how frames are split
    into chunks.
    """

    def __init__(self, bands: Iterable[str], hop_s: float, cfg: DetectConfig = DetectConfig(), los_t_s: float | None = None):
        self.clf = EventClassifier(bands, hop_s, cfg)
        self.los_t_s = los_t_s
        self._los_done = los_t_s is None
        self._seg = None

    def push(self, t_s: np.ndarray, z: np.ndarray, segment: np.ndarray | None = None) -> list[Alarm]:
        t = np.asarray(t_s, dtype=float)
        z = np.asarray(z, dtype=float).reshape(len(t), len(self.clf.bands))
        seg = np.zeros(len(t), dtype=np.int64) if segment is None else np.asarray(segment)
        cuts = np.flatnonzero(np.diff(seg)) + 1
        if not self._los_done:
            after = np.flatnonzero(t > self.los_t_s)
            if len(after):
                cuts = np.union1d(cuts, after[:1])
        out: list[Alarm] = []
        for i0, i1 in zip(np.r_[0, cuts], np.r_[cuts, len(t)]):
            if i0 == i1:
                continue
            if self._seg is not None and seg[i0] != self._seg:
                out.extend(self.clf.end_segment())
            self._seg = seg[i0]
            if not self._los_done and t[i0] > self.los_t_s:
                out.extend(self.clf.mark_los(self.los_t_s))
                self._los_done = True
            out.extend(self.clf.push(t[i0:i1], z[i0:i1]))
        return out

    def finish(self) -> list[Alarm]:
        out = self.clf.end_segment()
        if not self._los_done:
            out.extend(self.clf.mark_los(self.los_t_s))
            self._los_done = True
        out.extend(self.clf.finish())
        return out


def classify_events(
    scores: np.ndarray,
    features: BandFeatures,
    cfg: DetectConfig = DetectConfig(),
    los_t_s: float | None = None,
    segment: np.ndarray | None = None,
    hop_s: float | None = None,
) -> list[Alarm]:
    """Batch classification of z-scored frames (one :class:`AlarmStream` push).

    ``segment`` labels the valid-data segment of each frame; a label change
    closes any open run.  ``los_t_s`` is the loss-of-signal time, if any; it
    is reported as an alarm at its place in time.
    """
    t = np.asarray(features.t_s, dtype=float)
    if hop_s is None:
        hop_s = float(np.median(np.diff(t))) if len(t) > 1 else 0.0
    stream = AlarmStream(features.bands, hop_s, cfg, los_t_s)
    return sort_alarms(stream.push(t, scores, segment) + stream.finish())


# ----------------------------------------------------------------------------
# loss of signal
# ----------------------------------------------------------------------------


class LosDetector:
    """Streaming loss-of-signal detector over SOP samples.

    A sample is *down* when it is invalid or its ``s0`` lies more than
    ``los_drop_db`` below the mean ``s0`` of the leading reference window.
    LOS is the start of the first down-run lasting at least ``los_hold_s``.
    """

    def __init__(self, sample_period_s: float, start_t_s: float = 0.0, cfg: DetectConfig = DetectConfig()):
        self.dt = float(sample_period_s)
        self.t0 = float(start_t_s)
        self.cfg = cfg
        self.n_ref = max(1, int(round(cfg.los_ref_window_s / self.dt)))
        self.n_hold = max(1, int(math.ceil(cfg.los_hold_s / self.dt - 1e-9)))
        self._ref_sum = 0.0
        self._ref_n = 0
        self._seen = 0
        self._run_start: int | None = None
        self._run_len = 0
        self._pending: list[tuple[np.ndarray, np.ndarray]] = []
        self.los_t_s: float | None = None

    @property
    def threshold(self) -> float | None:
        if self._ref_n == 0:
            return None
        return self._ref_sum / self._ref_n * 10 ** (-self.cfg.los_drop_db / 10)

    def push(self, s0: np.ndarray, valid: np.ndarray) -> float | None:
        """Consume samples; returns the LOS time once (when first found)."""
        if self.los_t_s is not None:
            return None
        s0 = np.asarray(s0, dtype=float)
        valid = np.asarray(valid, dtype=bool)
        # reference from the leading window's valid samples
        i_ref = max(0, min(len(s0), self.n_ref - self._seen))
        if i_ref:
            v = valid[:i_ref]
            self._ref_sum += float(s0[:i_ref][v].sum())
            self._ref_n += int(v.sum())
        if self._seen + len(s0) < self.n_ref:
            # hold samples until the reference window is complete
            self._pending.append((s0, valid))
            self._seen += len(s0)
            return None
        if self._pending:
            s0 = np.concatenate([p[0] for p in self._pending] + [s0])
            valid = np.concatenate([p[1] for p in self._pending] + [valid])
            base = self._seen - sum(len(p[0]) for p in self._pending)
            self._pending = []
        else:
            base = self._seen
        self._seen = base + len(s0)
        thr = self.threshold
        down = ~valid if thr is None else (~valid | (s0 < thr))
        return self._scan(down, base)

    def _scan(self, down: np.ndarray, base: int) -> float | None:
        i = 0
        n = len(down)
        while i < n:
            if down[i]:
                if self._run_start is None:
                    self._run_start = base + i
                    self._run_len = 0
                up = np.flatnonzero(~down[i:])
                j = i + int(up[0]) if len(up) else n
                self._run_len += j - i
                if self._run_len >= self.n_hold:
                    self.los_t_s = self.t0 + self._run_start * self.dt
                    return self.los_t_s
                i = j
            else:
                self._run_start = None
                self._run_len = 0
                nxt = np.flatnonzero(down[i:])
                if len(nxt) == 0:
                    break
                i += int(nxt[0])
        return None

    def finish(self) -> float | None:
        if self.los_t_s is None and self._pending:
            pend, self._pending = self._pending, []
            s0 = np.concatenate([p[0] for p in pend])
            valid = np.concatenate([p[1] for p in pend])
            base = self._seen - len(s0)
            thr = self.threshold
            down = ~valid if thr is None else (~valid | (s0 < thr))
            return self._scan(down, base)
        return self.los_t_s


def detect_los(series: SopSeries, cfg: DetectConfig = DetectConfig()) -> float | None:
    """Earliest loss-of-signal instant in ``series`` or ``None``."""
    det = LosDetector(series.sample_period_s, series.start_t_s, cfg)
    t = det.push(series.stokes[:, 0], series.valid_mask())
    return t if t is not None else det.finish()
