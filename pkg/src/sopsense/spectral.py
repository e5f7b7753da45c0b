"""
Spectral processing of SOP traces: mains notches, spectrograms, band
energies and decimation.

Power scaling
-------------
A frame ``x[0..N-1]`` with Hann window ``w`` gives one-sided bin powers::

    P_k = c_k |X_k|^2 / (N * sum(w^2)),   X = rfft(w * x)

with ``c_k = 2`` except at DC and Nyquist (``c_k = 1``).  By Parseval,
``sum_k P_k`` is the window-weighted mean square
``sum(w^2 x^2) / sum(w^2)``, so summing a band gives that band's share of
the trace's mean-square value.  Spectrogram values in dB are
``10 log10(max(P, 1e-30))``; an all-zero frame therefore reads -300 dB.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import signal

POWER_FLOOR = 1e-30
FLOOR_DB = 10 * math.log10(POWER_FLOOR)

# frequency bands used for features, [lo, hi) in Hz
BANDS: dict[str, tuple[float, float]] = {
    "low": (0.05, 1.0),
    "mid": (1.0, 20.0),
    "high": (20.0, 200.0),
}


# ----------------------------------------------------------------------------
# notch filtering
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class NotchSpec:
    """Band-stop notches with a -3 dB width of ``width_hz`` after zero-phase filtering."""

    center_hz: tuple[float, ...] = (50.0, 100.0, 150.0)
    width_hz: float = 1.5
    sample_rate_hz: float = 1e4
    mains_hz: float = 50.0

    def __post_init__(self):
        object.__setattr__(self, "center_hz", tuple(float(c) for c in np.atleast_1d(self.center_hz)))
        errs = self.problems()
        if errs:
            raise ValueError("; ".join(errs))

    def problems(self) -> list[str]:
        out = []
        if not self.center_hz:
            out.append("at least one notch center is required")
        if not (self.width_hz > 0 and math.isfinite(self.width_hz)):
            out.append("width_hz must be positive")
        if not self.sample_rate_hz > 0:
            out.append("sample_rate_hz must be positive")
        for c in self.center_hz:
            if not c - self.width_hz / 2 > 0:
                out.append(f"notch at {c} Hz extends below 0 Hz")
            if not c + self.width_hz / 2 < self.sample_rate_hz / 2:
                out.append(f"notch at {c} Hz extends beyond Nyquist")
        return out

    @property
    def period_samples(self) -> int:
        """Samples per mains period (the shortest trace the notch accepts)."""
        return max(1, int(round(self.sample_rate_hz / self.mains_hz)))

    @property
    def single_pass_width_hz(self) -> float:
        # forward-backward squares |H|; the single-pass -3 dB width w1 of a
        # second-order notch maps to w1 / sqrt(sqrt(2) - 1) at the -3 dB
        # level of |H|^2
        return self.width_hz * math.sqrt(math.sqrt(2) - 1)

    @property
    def pad_samples(self) -> int:
        """Edge extension long enough for the slowest pole to decay ~12 time constants."""
        tau = 1.0 / (math.pi * self.single_pass_width_hz)
        return int(math.ceil(12 * tau * self.sample_rate_hz))

    def sos(self) -> np.ndarray:
        parts = []
        for c in self.center_hz:
            b, a = signal.iirnotch(c, c / self.single_pass_width_hz, fs=self.sample_rate_hz)
            parts.append(signal.tf2sos(b, a))
        return np.concatenate(parts)


def _edge_basis(k: np.ndarray, spec: NotchSpec) -> np.ndarray:
    """Columns: constant, slope, and cos/sin at every notch center (``k`` in samples)."""
    cols = [np.ones_like(k), k / spec.sample_rate_hz]
    for c in spec.center_hz:
        w = 2 * np.pi * c / spec.sample_rate_hz
        cols += [np.cos(w * k), np.sin(w * k)]
    return np.stack(cols, axis=1)


def _extend_right(x: np.ndarray, n: int, spec: NotchSpec) -> np.ndarray:
    """``n`` synthetic samples continuing ``x`` past its last sample.

    The edge window (up to ``pad_samples`` long) is fitted with a line plus
    the notch tones; the model is continued and the fit residual is
    odd-reflected about the edge, so value and slope stay continuous and
    the tones keep their phase.
    """
    if n == 0:
        return np.zeros(0)
    m = min(len(x), spec.pad_samples)
    k_in = np.arange(-m + 1, 1, dtype=float)
    basis = _edge_basis(k_in, spec)
    coef, *_ = np.linalg.lstsq(basis, x[-m:], rcond=None)
    resid = x[-m:] - basis @ coef
    k_out = np.arange(1, n + 1, dtype=float)
    r = np.full(n, resid[-1])
    j = min(n, m - 1)
    r[:j] = 2 * resid[-1] - resid[-2 : -2 - j : -1]
    return _edge_basis(k_out, spec) @ coef + r


def notch_with_context(
    x: np.ndarray, spec: NotchSpec, left: np.ndarray | None = None, right: np.ndarray | None = None
) -> np.ndarray:
    """Zero-phase notch of ``x`` using real neighbouring samples where available.

    ``left``/``right`` are samples immediately before/after ``x``.  Missing
    context up to :attr:`NotchSpec.pad_samples` is synthesized from a fit of
    the outermost samples (a line plus the notch tones, residual reflected),
    so the filter sees neither a step nor a switched-on tone at the edges.
    """
    x = np.asarray(x, dtype=float)
    pad = spec.pad_samples
    period = spec.period_samples
    left = np.zeros(0) if left is None else np.asarray(left, dtype=float)[-pad:]
    right = np.zeros(0) if right is None else np.asarray(right, dtype=float)[:pad]
    core = np.concatenate([left, x, right])
    if len(core) < period:
        raise ValueError(f"trace must hold at least one mains period ({period} samples)")
    ext = np.concatenate(
        [
            _extend_right(core[::-1], pad - len(left), spec)[::-1],
            core,
            _extend_right(core, pad - len(right), spec),
        ]
    )
    y = signal.sosfiltfilt(spec.sos(), ext, padlen=0)
    return y[pad : pad + len(x)]


def apply_notches(trace: np.ndarray, spec: NotchSpec) -> np.ndarray:
    """Cascaded second-order notches applied forward and backward (zero phase).

    Each single-pass notch is designed so that the squared response of the
    forward-backward pair is -3 dB at ``center +- width / 2``.  Edges are
    handled by model-based extension (see :func:`notch_with_context`).
    """
    trace = np.asarray(trace, dtype=float)
    if len(trace) < 2 * spec.period_samples:
        raise ValueError(f"trace shorter than two mains periods ({2 * spec.period_samples} samples)")
    if not np.any(trace):
        return np.zeros_like(trace)
    return notch_with_context(trace, spec)


def notch_response_db(spec: NotchSpec, freqs_hz: np.ndarray) -> np.ndarray:
    """Zero-phase (forward-backward) magnitude response in dB."""
    _, h = signal.sosfreqz(spec.sos(), worN=np.asarray(freqs_hz, dtype=float), fs=spec.sample_rate_hz)
    return 20 * np.log10(np.maximum(np.abs(h) ** 2, 1e-300))


# ----------------------------------------------------------------------------
# spectrograms
# ----------------------------------------------------------------------------


@dataclass
class Spectrogram:
    """One-sided power spectrogram (frames x bins); see the module notes for scaling."""

    frame_times_s: np.ndarray
    freq_bins_hz: np.ndarray
    power: np.ndarray
    window_len: int
    hop: int

    def __post_init__(self):
        self.power = np.asarray(self.power, dtype=float).reshape(len(self.frame_times_s), len(self.freq_bins_hz))

    @property
    def magnitude_db(self) -> np.ndarray:
        return 10 * np.log10(np.maximum(self.power, POWER_FLOOR))

    def __len__(self) -> int:
        return len(self.frame_times_s)

    @classmethod
    def concat(cls, parts: list["Spectrogram"]) -> "Spectrogram":
        first = parts[0]
        return cls(
            np.concatenate([p.frame_times_s for p in parts]),
            first.freq_bins_hz,
            np.concatenate([p.power for p in parts]),
            first.window_len,
            first.hop,
        )


@dataclass(frozen=True)
class SpectrogramPreset:
    name: str
    window_len: int
    hop: int
    decimate: int = 1
    detrend: str | None = None
    export_max_hz: float | None = None


PRESET_SPECTROGRAMS = {
    "event": SpectrogramPreset("event", 4096, 1024, 1, "linear", 250.0),
    "baseline": SpectrogramPreset("baseline", 65536, 16384, 16, "constant", 100.0),
}


def _trend_basis(n: int, detrend: str) -> np.ndarray:
    """Orthonormal rows spanning the per-frame trend (constant, or constant + ramp)."""
    basis = [np.full(n, 1 / math.sqrt(n))]
    if detrend == "linear":
        ramp = np.arange(n) - (n - 1) / 2
        basis.append(ramp / np.linalg.norm(ramp))
    return np.array(basis)


def _frame_power(frames: np.ndarray, window: np.ndarray, detrend: str | None) -> np.ndarray:
    n = frames.shape[-1]
    if detrend is not None:
        # least-squares trend removal by projection onto an orthonormal basis;
        # row-wise reductions keep each frame's result independent of batching
        for b in _trend_basis(n, detrend):
            frames = frames - (frames * b).sum(axis=1, keepdims=True) * b
    spec = np.fft.rfft(frames * window, axis=-1)
    p = spec.real**2 + spec.imag**2
    p *= _bin_weights(n) / (n * np.sum(window**2))
    return p


def _bin_weights(n: int) -> np.ndarray:
    c = np.full(n // 2 + 1, 2.0)
    c[0] = 1.0
    if n % 2 == 0:
        c[-1] = 1.0
    return c


def _check_detrend(detrend: str | None) -> None:
    if detrend not in (None, "constant", "linear"):
        raise ValueError("detrend must be None, 'constant' or 'linear'")


def stft_spectrogram(
    trace: np.ndarray,
    sample_rate_hz: float,
    window_len: int = 4096,
    hop: int = 1024,
    start_t_s: float = 0.0,
    detrend: str | None = None,
) -> Spectrogram:
    """Hann-windowed short-time power spectrum.

    Frame ``i`` covers samples ``[i * hop, i * hop + window_len)`` and is
    stamped at its center, ``start_t_s + (i * hop + window_len / 2) / fs``.
    ``detrend`` removes the per-frame mean (``"constant"``) or a least-squares
    line (``"linear"``) before windowing.
    """
    trace = np.asarray(trace, dtype=float)
    if hop < 1:
        raise ValueError("hop must be >= 1")
    if window_len < 2:
        raise ValueError("window_len must be >= 2")
    if window_len > len(trace):
        raise ValueError(f"window ({window_len}) longer than trace ({len(trace)})")
    _check_detrend(detrend)
    sst = StreamingSTFT(sample_rate_hz, window_len, hop, start_t_s, detrend)
    return sst.push(trace)


class StreamingSTFT:
    """Chunked spectrogram identical (bit for bit) to :func:`stft_spectrogram`.

    Keeps at most ``window_len - 1`` unconsumed samples between pushes.
    """

    def __init__(
        self,
        sample_rate_hz: float,
        window_len: int = 4096,
        hop: int = 1024,
        start_t_s: float = 0.0,
        detrend: str | None = None,
        max_frames_per_batch: int = 256,
    ):
        if hop < 1 or window_len < 2:
            raise ValueError("need hop >= 1 and window_len >= 2")
        _check_detrend(detrend)
        self.fs = float(sample_rate_hz)
        self.window_len = window_len
        self.hop = hop
        self.start_t_s = start_t_s
        self.detrend = detrend
        self.window = signal.windows.hann(window_len, sym=False)
        self.freqs = np.fft.rfftfreq(window_len, 1.0 / self.fs)
        self._buf = np.zeros(0)
        self._frame = 0
        self._batch = max_frames_per_batch

    def push(self, chunk: np.ndarray) -> Spectrogram:
        """Consume samples; returns the frames completed by this chunk."""
        self._buf = np.concatenate([self._buf, np.asarray(chunk, dtype=float)])
        n = self.window_len
        n_frames = 0 if len(self._buf) < n else (len(self._buf) - n) // self.hop + 1
        powers = []
        for f0 in range(0, n_frames, self._batch):
            f1 = min(n_frames, f0 + self._batch)
            idx = np.arange(f0, f1)[:, None] * self.hop + np.arange(n)[None, :]
            powers.append(_frame_power(self._buf[idx], self.window, self.detrend))
        frame_idx = self._frame + np.arange(n_frames)
        times = self.start_t_s + (frame_idx * self.hop + n / 2) / self.fs
        self._frame += n_frames
        self._buf = self._buf[n_frames * self.hop :]
        power = np.concatenate(powers) if powers else np.zeros((0, len(self.freqs)))
        return Spectrogram(times, self.freqs, power, n, self.hop)


def dft_power_bruteforce(frame: np.ndarray, window: np.ndarray) -> np.ndarray:
    """Reference one-sided bin powers via an explicit DFT sum."""
    n = len(frame)
    k = np.arange(n // 2 + 1)
    # exact twiddle angles: reduce n*k modulo N before scaling
    phase = (np.outer(k, np.arange(n)) % n) * (2 * np.pi / n)
    xw = frame * window
    re = np.cos(phase) @ xw
    im = -np.sin(phase) @ xw
    return (re**2 + im**2) * _bin_weights(n) / (n * np.sum(window**2))


# ----------------------------------------------------------------------------
# band features
# ----------------------------------------------------------------------------


@dataclass
class BandFeatures:
    """Per-frame band energies in dB (frames x bands)."""

    t_s: np.ndarray
    bands: tuple[str, ...]
    energy_db: np.ndarray
    edges_hz: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.t_s)

    def band(self, name: str) -> np.ndarray:
        return self.energy_db[:, self.bands.index(name)]


def band_mask(freqs_hz: np.ndarray, lo: float, hi: float, exclude: Sequence[tuple[float, float]] = ()) -> np.ndarray:
    """Bins with ``lo <= f < hi`` outside every ``exclude`` interval ``[a, b]``."""
    freqs_hz = np.asarray(freqs_hz)
    mask = (freqs_hz >= lo) & (freqs_hz < hi)
    for a, b in exclude:
        mask &= ~((freqs_hz >= a) & (freqs_hz <= b))
    return mask


def mains_guard(centers_hz: Sequence[float], half_width_hz: float) -> list[tuple[float, float]]:
    """Exclusion intervals ``center +- half_width_hz`` around mains harmonics."""
    return [(c - half_width_hz, c + half_width_hz) for c in centers_hz]


def band_power(
    spec: Spectrogram, bands: dict[str, tuple[float, float]], exclude: Sequence[tuple[float, float]] = ()
) -> np.ndarray:
    """Linear per-frame band sums (frames x bands), skipping ``exclude`` intervals."""
    nyq = spec.freq_bins_hz[-1] if len(spec.freq_bins_hz) else 0.0
    cols = []
    for name, (lo, hi) in bands.items():
        if not (0 <= lo < hi):
            raise ValueError(f"band {name!r} has invalid edges")
        if lo > nyq:
            raise ValueError(f"band {name!r} lies above Nyquist")
        mask = band_mask(spec.freq_bins_hz, lo, hi, exclude)
        if not mask.any():
            raise ValueError(f"band {name!r} [{lo}, {hi}) Hz contains no frequency bins")
        cols.append(spec.power[:, mask].sum(axis=1))
    return np.stack(cols, axis=1) if cols else np.zeros((len(spec), 0))


def band_energies(
    spec: Spectrogram,
    bands: dict[str, tuple[float, float]] | None = None,
    exclude: Sequence[tuple[float, float]] = (),
) -> BandFeatures:
    """Per-frame summed bin power of each band, in dB (floored like the spectrogram)."""
    bands = dict(BANDS if bands is None else bands)
    p = band_power(spec, bands, exclude)
    return BandFeatures(spec.frame_times_s, tuple(bands), 10 * np.log10(np.maximum(p, POWER_FLOOR)), bands)


def usable_bands(
    freqs_hz: np.ndarray,
    bands: dict[str, tuple[float, float]] | None = None,
    exclude: Sequence[tuple[float, float]] = (),
) -> dict:
    """The subset of ``bands`` that contains at least one bin."""
    bands = BANDS if bands is None else bands
    return {k: v for k, v in bands.items() if band_mask(freqs_hz, v[0], v[1], exclude).any()}


# ----------------------------------------------------------------------------
# decimation
# ----------------------------------------------------------------------------


def decimation_taps(factor: int) -> np.ndarray:
    """Linear-phase low-pass for ``factor``-fold decimation.

    Kaiser design with >= 80 dB stopband starting below the new Nyquist
    frequency; DC gain is exactly 1.
    """
    if factor == 1:
        return np.ones(1)
    nyq_new = 1.0 / factor
    numtaps = 24 * factor + 1
    h = signal.firwin(numtaps, 0.7 * nyq_new, window=("kaiser", 8.6))
    return h / h.sum()


def downsample_decimate(trace: np.ndarray, factor: int) -> np.ndarray:
    """Anti-aliased decimation keeping samples ``0, factor, 2 factor, ...``.

    The filter is applied centered (zero delay) with zeros beyond the ends.
    """
    if int(factor) != factor or factor < 1:
        raise ValueError("factor must be an integer >= 1")
    trace = np.asarray(trace, dtype=float)
    if factor == 1:
        return trace.copy()
    dec = Decimator(factor)
    return np.concatenate([dec.push(trace), dec.finish()])


class Decimator:
    """Streaming form of :func:`downsample_decimate` with identical output."""

    def __init__(self, factor: int):
        if int(factor) != factor or factor < 1:
            raise ValueError("factor must be an integer >= 1")
        self.factor = int(factor)
        self.taps = decimation_taps(self.factor)
        self.half = (len(self.taps) - 1) // 2
        # buffer starts at global index _origin (may be negative: zero history)
        self._buf = np.zeros(self.half)
        self._origin = -self.half
        self._next = 0
        self._seen = 0

    def _emit(self, last_needed: int) -> np.ndarray:
        m1 = (last_needed - self.half) // self.factor + 1 if last_needed >= self.half else 0
        m1 = max(m1, self._next)
        if m1 <= self._next:
            return np.zeros(0)
        lo = self._next * self.factor - self.half - self._origin
        hi = (m1 - 1) * self.factor + self.half + 1 - self._origin
        seg = self._buf[lo:hi]
        full = signal.fftconvolve(seg, self.taps, mode="valid") if len(self.taps) > 1 else seg
        out = full[:: self.factor]
        self._next = m1
        drop = self._next * self.factor - self.half - self._origin
        self._buf = self._buf[drop:]
        self._origin += drop
        return out

    def push(self, chunk: np.ndarray) -> np.ndarray:
        chunk = np.asarray(chunk, dtype=float)
        self._buf = np.concatenate([self._buf, chunk])
        self._seen += len(chunk)
        return self._emit(self._seen - 1)

    def finish(self) -> np.ndarray:
        """Flush with zero padding; output count is ``ceil(n / factor)``."""
        n_out = -(-self._seen // self.factor)
        if n_out <= self._next:
            return np.zeros(0)
        self._buf = np.concatenate([self._buf, np.zeros(self.half)])
        return self._emit((n_out - 1) * self.factor + self.half)
