"""
Time-varying lumped Jones channel driven by a scenario script.

The transfer at time ``t`` is composed as::

    J(t) = J_break(t) @ J_event(t) @ J_mains(t) @ J_drift(t)

with ``J_event`` the product of burst/flutter rotations in script order
(later events on the left).  Every factor is a Poincaré-sphere rotation, so
the channel is unitary until the break completes; after that the matrix is
scaled down to the scripted post-break power.

Randomness (drift track, event axes, flutter waveform) is drawn from
``numpy.random.default_rng([seed, event_index, stream])`` and evaluated on
fixed grids, so ``J(t)`` is a pure function of the script and ``t``.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass

import numba
import numpy as np
from scipy import signal, special

from .scenario import ChannelEvent, EventScript
from .sop import (
    LAUNCH_X,
    SopSeries,
    jones_from_quat,
    quat_about_axis,
    quat_from_rotvec,
    quat_mul,
    stokes_from_jones,
)
from .waveform import DualPolBlock

S3_AXIS = np.array([0.0, 0.0, 1.0])
FLUTTER_GRID_S = 1e-4
CHIRP_START_HZ = 20.0
CHIRP_STOP_HZ = 200.0
_TIME_TOL = 1e-9


@dataclass(frozen=True)
class NoiseSpec:
    """ASE modeled as white circular Gaussian noise.

    ``osnr_db`` is referenced to ``ref_bandwidth_hz`` (0.1 nm = 12.5 GHz at
    full scale).  The per-polarization, per-sample SNR delivered at sample
    rate ``fs`` is::

        snr_db = osnr_db + 10 log10(ref_bandwidth_hz / fs)

    i.e. noise in both polarizations over ``fs`` against half the total
    signal power per polarization.
    """

    osnr_db: float
    enabled: bool = True
    ref_bandwidth_hz: float = 12.5e9

    def snr_db(self, sample_rate_hz: float) -> float:
        return self.osnr_db + 10 * math.log10(self.ref_bandwidth_hz / sample_rate_hz)

    @classmethod
    def for_snr(cls, snr_db: float, sample_rate_hz: float, ref_bandwidth_hz: float = 12.5e9) -> "NoiseSpec":
        """Spec that yields ``snr_db`` per sample at ``sample_rate_hz``."""
        return cls(snr_db - 10 * math.log10(ref_bandwidth_hz / sample_rate_hz), True, ref_bandwidth_hz)


# ----------------------------------------------------------------------------
# compiled event evaluators
# ----------------------------------------------------------------------------


def _event_rng(seed: int, index: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, index, stream])


def _random_axis(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def _ou(rng: np.random.Generator, n: int, dt: float, corner_hz: float, rms: float, dims: int) -> np.ndarray:
    """Stationary first-order low-pass Gaussian process sampled every ``dt``."""
    a = math.exp(-2 * math.pi * corner_hz * dt)
    x0 = rng.normal(size=dims) * rms
    drive = rng.normal(size=(n, dims)) * (rms * math.sqrt(1 - a * a))
    out, _ = signal.lfilter([1.0], [1.0, -a], drive, axis=0, zi=(a * x0)[None, :])
    return out


@numba.njit(cache=True)
def _accumulate(increments):
    # q[k+1] = increments[k] * q[k], renormalized every step
    n = increments.shape[0]
    q = np.empty((n + 1, 4))
    q[0, 0] = 1.0
    q[0, 1] = 0.0
    q[0, 2] = 0.0
    q[0, 3] = 0.0
    for k in range(n):
        aw, ax, ay, az = increments[k, 0], increments[k, 1], increments[k, 2], increments[k, 3]
        bw, bx, by, bz = q[k, 0], q[k, 1], q[k, 2], q[k, 3]
        w = aw * bw - ax * bx - ay * by - az * bz
        x = aw * bx + ax * bw + ay * bz - az * by
        y = aw * by - ax * bz + ay * bw + az * bx
        z = aw * bz + ax * by - ay * bx + az * bw
        nrm = math.sqrt(w * w + x * x + y * y + z * z)
        q[k + 1, 0] = w / nrm
        q[k + 1, 1] = x / nrm
        q[k + 1, 2] = y / nrm
        q[k + 1, 3] = z / nrm
    return q


class _Drift:
    """Rotation track with piecewise-constant angular velocity on a grid."""

    def __init__(self, ev: ChannelEvent, seed: int, index: int, total_s: float):
        self.start = ev.start_s
        self.end = min(ev.end_s, total_s)
        corner = float(ev["bandwidth_hz"])
        self.dt = min(0.01, 0.05 / corner)
        n = int(math.ceil((self.end - self.start) / self.dt)) + 2
        rms = float(ev["rate_rad_s"]) / math.sqrt(3.0)
        self.omega = _ou(_event_rng(seed, index, 0), n, self.dt, corner, rms, 3)
        self.q = _accumulate(quat_from_rotvec(self.omega * self.dt))

    def quat(self, t: np.ndarray) -> np.ndarray:
        tau = np.clip(t, self.start, self.end) - self.start
        k = np.minimum((tau / self.dt).astype(np.int64), len(self.omega) - 1)
        frac = tau - k * self.dt
        return quat_mul(quat_from_rotvec(self.omega[k] * frac[:, None]), self.q[k])


class _Mains:
    def __init__(self, ev: ChannelEvent):
        self.start = ev.start_s
        self.end = ev.end_s
        self.f0 = float(ev["fundamental_hz"])
        self.peaks = [float(p) for p in ev["harmonic_peaks_rad"]]

    def angle(self, t: np.ndarray) -> np.ndarray:
        theta = np.zeros_like(t)
        for h, peak in enumerate(self.peaks, start=1):
            if peak != 0.0:
                theta += peak * np.sin(2 * np.pi * h * self.f0 * t)
        active = (t >= self.start) & (t <= self.end)
        return np.where(active, theta, 0.0)

    def quat(self, t: np.ndarray) -> np.ndarray:
        return quat_about_axis(S3_AXIS, self.angle(t))


class _Burst:
    def __init__(self, ev: ChannelEvent, seed: int, index: int):
        self.axis = _random_axis(_event_rng(seed, index, 1))
        width = float(ev["width_s"])
        self.width = width
        self.step = float(ev["peak_rate_rad_s"]) * width * math.sqrt(2 * math.pi)
        period = float(ev["period_s"])
        self.centers = ev.start_s + (np.arange(int(ev["count"])) + 0.5) * period

    def angle(self, t: np.ndarray) -> np.ndarray:
        theta = np.zeros_like(t)
        for c in self.centers:
            theta += self.step * special.ndtr((t - c) / self.width)
        return theta

    def quat(self, t: np.ndarray) -> np.ndarray:
        return quat_about_axis(self.axis, self.angle(t))


class _Flutter:
    def __init__(self, ev: ChannelEvent, seed: int, index: int):
        rng = _event_rng(seed, index, 1)
        self.axis = _random_axis(rng)
        self.start = ev.start_s
        dt = FLUTTER_GRID_S
        n = int(math.ceil(ev.duration_s / dt))
        self.dt = dt
        rate = _ou(rng, n, dt, float(ev["bandwidth_hz"]), float(ev["rate_rad_s"]), 1)[:, 0]
        tt = np.arange(n) * dt
        edge = min(1.0, ev.duration_s / 4)
        env = np.ones(n)
        rise = tt < edge
        env[rise] = 0.5 - 0.5 * np.cos(np.pi * tt[rise] / edge)
        fall = tt > ev.duration_s - edge
        env[fall] = 0.5 - 0.5 * np.cos(np.pi * (ev.duration_s - tt[fall]) / edge)
        self.rate = rate * env
        self.theta = np.concatenate([[0.0], np.cumsum(self.rate) * dt])

    def angle(self, t: np.ndarray) -> np.ndarray:
        tau = t - self.start
        k = np.clip((tau / self.dt).astype(np.int64), 0, len(self.rate) - 1)
        theta = self.theta[k] + self.rate[k] * (tau - k * self.dt)
        theta = np.where(tau <= 0, 0.0, theta)
        return np.where(tau >= len(self.rate) * self.dt, self.theta[-1], theta)

    def quat(self, t: np.ndarray) -> np.ndarray:
        return quat_about_axis(self.axis, self.angle(t))


class _Break:
    def __init__(self, ev: ChannelEvent, seed: int, index: int):
        self.axis = _random_axis(_event_rng(seed, index, 1))
        self.start = ev.start_s
        self.ramp = float(ev["ramp_s"])
        self.peak = float(ev["peak_rate_rad_s"])
        self.completion = self.start + self.ramp
        self.collapse = float(ev["collapse_s"])
        self.post_db = float(ev["post_power_db"])

    def angle(self, t: np.ndarray) -> np.ndarray:
        tau = np.clip(t - self.start, 0.0, self.ramp)
        f0, f1 = CHIRP_START_HZ, CHIRP_STOP_HZ
        inst = f0 + (f1 - f0) * tau / self.ramp
        phase = 2 * np.pi * (f0 * tau + 0.5 * (f1 - f0) * tau**2 / self.ramp)
        # derivative is ~ peak * sin(phase) while the chirp sweeps slowly
        return self.peak / (2 * np.pi * inst) * (1 - np.cos(phase))

    def amplitude(self, t: np.ndarray) -> np.ndarray:
        frac = np.clip((t - self.completion) / self.collapse, 0.0, 1.0)
        return 10.0 ** (self.post_db / 20.0 * frac)

    def quat(self, t: np.ndarray) -> np.ndarray:
        return quat_about_axis(self.axis, self.angle(t))


class CompiledChannel:
    """Evaluator for one script; built once and cached by script digest."""

    def __init__(self, script: EventScript):
        self.script = script
        self.total = script.total_duration_s
        self.drifts = []
        self.mains = []
        self.events = []
        self.brk = None
        for i, ev in enumerate(script.events):
            if ev.kind == "drift":
                self.drifts.append(_Drift(ev, script.seed, i, script.total_duration_s))
            elif ev.kind == "mains_tone":
                self.mains.append(_Mains(ev))
            elif ev.kind == "burst":
                self.events.append(_Burst(ev, script.seed, i))
            elif ev.kind == "flutter":
                self.events.append(_Flutter(ev, script.seed, i))
            elif ev.kind == "break":
                self.brk = _Break(ev, script.seed, i)

    def quat(self, t: np.ndarray) -> np.ndarray:
        q = np.zeros(t.shape + (4,))
        q[..., 0] = 1.0
        for part in self.drifts:
            q = quat_mul(part.quat(t), q)
        for part in self.mains:
            q = quat_mul(part.quat(t), q)
        for part in self.events:
            q = quat_mul(part.quat(t), q)
        if self.brk is not None:
            q = quat_mul(self.brk.quat(t), q)
        return q

    def jones(self, t: np.ndarray) -> np.ndarray:
        j = jones_from_quat(self.quat(t))
        if self.brk is not None:
            j = j * self.brk.amplitude(t)[:, None, None]
        return j

    def valid(self, t: np.ndarray) -> np.ndarray:
        return t < self.script.break_completion_s()


_CACHE: "OrderedDict[str, CompiledChannel]" = OrderedDict()


def compiled(script: EventScript) -> CompiledChannel:
    key = script.digest()
    hit = _CACHE.get(key)
    if hit is None:
        hit = CompiledChannel(script)
        _CACHE[key] = hit
        while len(_CACHE) > 8:
            _CACHE.popitem(last=False)
    else:
        _CACHE.move_to_end(key)
    return hit


def _check_times(script: EventScript, t: np.ndarray) -> None:
    if t.size and (t.min() < -_TIME_TOL or t.max() > script.total_duration_s + _TIME_TOL):
        raise ValueError(
            f"time outside scenario range [0, {script.total_duration_s}] s"
        )


def jones_at(script: EventScript, t) -> np.ndarray:
    """Channel Jones matrix at ``t`` (scalar -> ``(2, 2)``, array -> ``(N, 2, 2)``)."""
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    _check_times(script, t_arr)
    j = compiled(script).jones(t_arr)
    return j[0] if np.ndim(t) == 0 else j


# ----------------------------------------------------------------------------
# SOP-direct ground truth
# ----------------------------------------------------------------------------


def _stokes_rows(script: EventScript, t: np.ndarray, launch: np.ndarray):
    ch = compiled(script)
    j = ch.jones(t)
    stokes = stokes_from_jones(j, launch)
    valid = ch.valid(t)
    stokes[~valid, 1:] = 0.0
    return stokes, valid


class SopDirectSource:
    """Lazily evaluated ground-truth SOP series (no waveform simulation).

    Behaves like a :class:`~sopsense.sop.SopSeries` for chunked consumers:
    ``len()``, ``slice(i0, i1)`` and ``valid_mask()``.
    """

    def __init__(self, script: EventScript, sample_period_s: float = 1e-4, launch=LAUNCH_X):
        if not sample_period_s > 0:
            raise ValueError("sample_period_s must be positive")
        self.script = script
        self.sample_period_s = float(sample_period_s)
        self.start_t_s = 0.0
        self.launch = np.asarray(launch, dtype=complex)
        self.n = int(math.floor(script.total_duration_s / sample_period_s + 1e-9))

    def __len__(self) -> int:
        return self.n

    @property
    def sample_rate_hz(self) -> float:
        return 1.0 / self.sample_period_s

    def times(self, i0: int = 0, i1: int | None = None) -> np.ndarray:
        i1 = self.n if i1 is None else i1
        return np.arange(i0, i1) * self.sample_period_s

    def slice(self, i0: int, i1: int) -> SopSeries:
        i0, i1 = max(0, i0), min(self.n, i1)
        stokes, valid = _stokes_rows(self.script, self.times(i0, i1), self.launch)
        return SopSeries(self.sample_period_s, i0 * self.sample_period_s, stokes, valid)

    def valid_mask(self) -> np.ndarray:
        return self.times() < self.script.break_completion_s()


def sop_direct_series(script: EventScript, sample_period_s: float = 1e-4, launch=LAUNCH_X) -> SopSeries:
    """Ground-truth SOP of ``J(k dt) @ launch`` for ``k < floor(T / dt)``.

    Samples after the break completes are flagged invalid, with zero
    ``s1..s3`` and ``s0`` equal to the residual transmitted power.
    """
    src = SopDirectSource(script, sample_period_s, launch)
    return src.slice(0, len(src))


def sop_at(script: EventScript, t, launch=LAUNCH_X) -> np.ndarray:
    """Ground-truth Stokes vectors at arbitrary instants."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    _check_times(script, t)
    return _stokes_rows(script, t, np.asarray(launch, dtype=complex))[0]


# ----------------------------------------------------------------------------
# waveform-level channel
# ----------------------------------------------------------------------------


def apply_jones(block: DualPolBlock, j: np.ndarray) -> DualPolBlock:
    """Apply a fixed ``(2, 2)`` or per-sample ``(N, 2, 2)`` Jones transfer."""
    j = np.asarray(j)
    if j.ndim == 2:
        j = j[None]
    x = j[:, 0, 0] * block.x + j[:, 0, 1] * block.y
    y = j[:, 1, 0] * block.x + j[:, 1, 1] * block.y
    return DualPolBlock(x, y, block.sample_rate_hz, block.t0_s)


def apply_to_block(script: EventScript, block: DualPolBlock, t0: float | None = None) -> DualPolBlock:
    """Per-sample channel: output ``k`` is ``J(t0 + k / fs)`` times input ``k``."""
    if len(block) == 0:
        raise ValueError("empty block")
    t0 = block.t0_s if t0 is None else t0
    t = t0 + np.arange(len(block)) / block.sample_rate_hz
    if t[0] < -_TIME_TOL or t[-1] > script.total_duration_s + _TIME_TOL:
        raise ValueError("block time range exceeds the scenario")
    out = apply_jones(block, compiled(script).jones(t))
    out.t0_s = t0
    return out


def add_noise(block: DualPolBlock, spec: NoiseSpec, seed, reference_power: float | None = None) -> DualPolBlock:
    """Add ASE-like noise at the per-sample SNR implied by ``spec``.

    The noise level is set from the mean signal power per polarization
    (total power / 2), so both polarizations see the same noise floor.
    Streaming callers pass ``reference_power`` (total power of the nominal
    signal) so the floor stays put when the signal itself collapses.
    ``seed`` is anything :func:`numpy.random.default_rng` accepts.
    """
    if not spec.enabled:
        return block
    if reference_power is None:
        power = 0.5 * float(np.mean(np.abs(block.x) ** 2 + np.abs(block.y) ** 2))
    else:
        power = 0.5 * float(reference_power)
    if not power > 0:
        raise ValueError("signal power must be positive to set an SNR")
    sigma = math.sqrt(power / 10 ** (spec.snr_db(block.sample_rate_hz) / 10) / 2)
    rng = np.random.default_rng(seed)
    n = len(block)
    nx = rng.normal(size=n) + 1j * rng.normal(size=n)
    ny = rng.normal(size=n) + 1j * rng.normal(size=n)
    return DualPolBlock(block.x + sigma * nx, block.y + sigma * ny, block.sample_rate_hz, block.t0_s)
