"""
Stokes-space utilities: Jones-to-Stokes conversion, SOP series and
Poincaré-sphere geometry.

Conventions
-----------
The Stokes components of a field ``e = (e_x, e_y)`` are::

    s0 = |e_x|^2 + |e_y|^2
    s1 = |e_x|^2 - |e_y|^2
    s2 = 2 Re(e_x conj(e_y))
    s3 = 2 Im(conj(e_x) e_y)          # right-circular positive

which is ``s_k = e^H sigma_k e`` with ``sigma_1 = diag(1, -1)``,
``sigma_2 = [[0, 1], [1, 0]]`` and ``sigma_3 = [[0, -i], [i, 0]]``.

Rotations of the Poincaré sphere are carried as unit quaternions
``q = (w, x, y, z)``; the matching Jones matrix is
``U = w I - i (x sigma_1 + y sigma_2 + z sigma_3)``.  A rotation by ``theta``
about the unit axis ``n`` is ``q = (cos(theta/2), n sin(theta/2))`` and turns
Stokes vectors right-handedly about ``n``.

The launch reference polarization is x-polarized, ``(1, 0)``, throughout.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numba
import numpy as np

if TYPE_CHECKING:
    from .equalizer import JonesSeries

LAUNCH_X = np.array([1.0 + 0.0j, 0.0 + 0.0j])


# ----------------------------------------------------------------------------
# quaternion / SU(2) helpers
# ----------------------------------------------------------------------------


def quat_from_rotvec(rotvec: np.ndarray) -> np.ndarray:
    """Unit quaternions for rotation vectors (axis * angle), shape ``(..., 4)``."""
    rotvec = np.asarray(rotvec, dtype=float)
    angle = np.sqrt(np.sum(rotvec**2, axis=-1))
    half = 0.5 * angle
    # sin(half)/angle without the 0/0 at angle == 0
    scale = np.where(angle > 0, np.sin(half) / np.where(angle > 0, angle, 1.0), 0.5)
    q = np.empty(rotvec.shape[:-1] + (4,))
    q[..., 0] = np.cos(half)
    q[..., 1:] = rotvec * scale[..., None]
    return q


def quat_about_axis(axis: np.ndarray, angle: np.ndarray) -> np.ndarray:
    """Quaternions for rotations by ``angle`` about a fixed unit ``axis``."""
    angle = np.asarray(angle, dtype=float)
    half = 0.5 * angle
    q = np.empty(angle.shape + (4,))
    q[..., 0] = np.cos(half)
    q[..., 1:] = np.multiply.outer(np.sin(half), np.asarray(axis, dtype=float))
    return q


@numba.njit(cache=True)
def _quat_mul_rows(a, b, out):
    for i in range(a.shape[0]):
        aw, ax, ay, az = a[i, 0], a[i, 1], a[i, 2], a[i, 3]
        bw, bx, by, bz = b[i, 0], b[i, 1], b[i, 2], b[i, 3]
        out[i, 0] = aw * bw - ax * bx - ay * by - az * bz
        out[i, 1] = aw * bx + ax * bw + ay * bz - az * by
        out[i, 2] = aw * by - ax * bz + ay * bw + az * bx
        out[i, 3] = aw * bz + ax * by - ay * bx + az * bw


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product ``a * b`` (rotation ``b`` first, then ``a``)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim == 2 and a.shape == b.shape and a.shape[1] == 4:
        out = np.empty_like(a)
        _quat_mul_rows(np.ascontiguousarray(a), np.ascontiguousarray(b), out)
        return out
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def jones_from_quat(q: np.ndarray) -> np.ndarray:
    """SU(2) Jones matrices, shape ``(..., 2, 2)``, for unit quaternions."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    j = np.empty(q.shape[:-1] + (2, 2), dtype=complex)
    j[..., 0, 0] = w - 1j * x
    j[..., 0, 1] = -z - 1j * y
    j[..., 1, 0] = z - 1j * y
    j[..., 1, 1] = w + 1j * x
    return j


def rotation_jones(axis, angle) -> np.ndarray:
    """Jones matrix rotating the Poincaré sphere by ``angle`` about ``axis``."""
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    return jones_from_quat(quat_about_axis(axis, angle))


def random_unitary(rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Haar-random U(2) matrices (random SU(2) times a random global phase)."""
    shape = () if size is None else (size,)
    q = rng.normal(size=shape + (4,))
    q /= np.linalg.norm(q, axis=-1, keepdims=True)
    phase = np.exp(1j * rng.uniform(0, 2 * np.pi, size=shape))
    return jones_from_quat(q) * phase[..., None, None]


# ----------------------------------------------------------------------------
# Stokes conversion
# ----------------------------------------------------------------------------


def stokes_from_field(e: np.ndarray) -> np.ndarray:
    """Stokes vectors ``(s0, s1, s2, s3)`` of fields with shape ``(..., 2)``."""
    e = np.asarray(e)
    ex = e[..., 0]
    ey = e[..., 1]
    px = ex.real**2 + ex.imag**2
    py = ey.real**2 + ey.imag**2
    # conj(ex) * ey from real products; complex multiply may fuse one of
    # them and break the symmetry under a quarter-turn phase
    cross_re = ex.real * ey.real + ex.imag * ey.imag
    cross_im = ex.real * ey.imag - ex.imag * ey.real
    return np.stack([px + py, px - py, 2 * cross_re, 2 * cross_im], axis=-1)


def stokes_from_jones(j: np.ndarray, launch: np.ndarray = LAUNCH_X) -> np.ndarray:
    """Stokes vector of ``J @ launch``.

    Works on a single ``(2, 2)`` matrix or a stack ``(..., 2, 2)``.

    Raises
    ------
    ValueError
        If the launch vector is not unit norm or ``j`` has non-finite entries.
    """
    j = np.asarray(j)
    launch = np.asarray(launch, dtype=complex)
    if not np.isclose(np.vdot(launch, launch).real, 1.0, rtol=0, atol=1e-12):
        raise ValueError("launch polarization must have unit norm")
    if not np.all(np.isfinite(j)):
        raise ValueError("Jones matrix has non-finite entries")
    e = j[..., :, 0] * launch[0] + j[..., :, 1] * launch[1]
    return stokes_from_field(e)


def great_circle_angle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Angle in radians between two SOPs on the Poincaré sphere.

    Accepts either 4-component ``(s0, s1, s2, s3)`` or 3-component
    ``(s1, s2, s3)`` vectors; only the direction of ``(s1, s2, s3)`` matters.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    va = a[..., -3:]
    vb = b[..., -3:]
    na = np.linalg.norm(va, axis=-1)
    nb = np.linalg.norm(vb, axis=-1)
    if np.any(na == 0) or np.any(nb == 0):
        raise ValueError("great_circle_angle needs fully polarized (non-zero) states")
    # atan2 form stays accurate near 0 and pi
    cross = np.linalg.norm(np.cross(va, vb), axis=-1)
    dot = np.sum(va * vb, axis=-1)
    return np.arctan2(cross, dot)


def normalized(stokes: np.ndarray) -> np.ndarray:
    """``(s1, s2, s3) / s0``; zero where ``s0`` is zero."""
    stokes = np.asarray(stokes, dtype=float)
    s0 = stokes[..., 0:1]
    safe = np.where(s0 > 0, s0, 1.0)
    return np.where(s0 > 0, stokes[..., 1:] / safe, 0.0)


# ----------------------------------------------------------------------------
# series
# ----------------------------------------------------------------------------


@dataclass
class SopSeries:
    """Uniformly sampled Stokes vectors with a validity flag per sample.

    ``stokes`` has shape ``(N, 4)``; ``valid`` is boolean ``(N,)``.  Sample
    ``k`` sits at ``start_t_s + k * sample_period_s``.
    """

    sample_period_s: float
    start_t_s: float
    stokes: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        if not self.sample_period_s > 0:
            raise ValueError("sample_period_s must be positive")
        if len(self.stokes) != len(self.valid):
            raise ValueError("stokes and valid must have equal length")

    def __len__(self) -> int:
        return len(self.valid)

    @property
    def sample_rate_hz(self) -> float:
        return 1.0 / self.sample_period_s

    def times(self, i0: int = 0, i1: int | None = None) -> np.ndarray:
        i1 = len(self) if i1 is None else i1
        return self.start_t_s + np.arange(i0, i1) * self.sample_period_s

    def slice(self, i0: int, i1: int) -> "SopSeries":
        """Materialized sub-series ``[i0, i1)``."""
        return SopSeries(
            self.sample_period_s,
            self.start_t_s + i0 * self.sample_period_s,
            np.asarray(self.stokes[i0:i1], dtype=float),
            np.asarray(self.valid[i0:i1], dtype=bool),
        )

    def valid_mask(self) -> np.ndarray:
        return np.asarray(self.valid, dtype=bool)


def series_from_jones(js: "JonesSeries", launch: np.ndarray = LAUNCH_X) -> SopSeries:
    """Element-wise Stokes conversion of an equalizer Jones stream.

    Invalid entries get zero ``s1..s3`` and ``s0`` equal to the residual
    output power measured by the equalizer.
    """
    if len(js) == 0:
        raise ValueError("empty Jones series")
    valid = np.asarray(js.valid, dtype=bool)
    mats = np.where(valid[:, None, None], js.matrices, np.eye(2))
    stokes = stokes_from_jones(mats, launch)
    stokes[~valid] = 0.0
    stokes[~valid, 0] = np.asarray(js.power)[~valid]
    return SopSeries(js.sample_period_s, float(js.t_s[0]), stokes, valid)


def deviation_from_reference(series: SopSeries, ref_window_s: float = 10.0) -> np.ndarray:
    """Per-component deviation of the normalized SOP from its initial state.

    The reference is the mean of normalized ``(s1, s2, s3)`` over the valid
    samples in the first ``ref_window_s`` seconds.  Returns an ``(N, 3)``
    array; invalid samples are NaN.
    """
    ref = reference_state(series, ref_window_s)
    dev = normalized(series.stokes) - ref
    dev[~series.valid_mask()] = np.nan
    return dev


def reference_state(series: SopSeries, ref_window_s: float = 10.0) -> np.ndarray:
    """Mean normalized ``(s1, s2, s3)`` over the leading reference window."""
    n_ref = int(round(ref_window_s / series.sample_period_s))
    head = series.slice(0, min(n_ref, len(series)))
    if n_ref < 1 or len(head) < n_ref or not head.valid_mask().all():
        raise ValueError("series has no full valid reference window")
    return normalized(head.stokes).mean(axis=0)
