"""
File formats.

SOP record file (binary, default)
---------------------------------
::

    b"SOPR"                      magic
    uint16 LE                    format version (1)
    uint32 LE                    header length H in bytes
    H bytes                      UTF-8 JSON header (sorted keys)
    n_samples * 33 bytes         records: s0, s1, s2, s3 as float64 LE, valid as uint8

Header keys: ``n_samples``, ``sample_period_s``, ``start_t_s``, ``launch``,
``stokes_convention``, ``scenario_sha256``.

SOP record file (CSV)
---------------------
``# key: value`` metadata lines (same keys as the binary header), then the
header row ``t_s,s0,s1,s2,s3,valid`` and one row per sample.  Floats are
written with 17 significant digits, so values round-trip exactly.

Jones file (binary)
-------------------
Same framing with magic ``b"JONS"``; records are ``t_s``, the four complex
entries ``xx, xy, yx, yy`` as (re, im) float64 pairs, ``power`` (float64)
and ``valid`` (uint8): 89 bytes.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import struct
from pathlib import Path

import numpy as np

from .detect import Alarm
from .equalizer import JonesSeries
from .sop import SopSeries
from .spectral import Spectrogram

SOP_MAGIC = b"SOPR"
JONES_MAGIC = b"JONS"
FORMAT_VERSION = 1
LAUNCH_DESCRIPTION = "x-polarized (1, 0)"
STOKES_CONVENTION = "s3 = 2 Im(conj(ex) ey), right-circular positive"

SOP_DTYPE = np.dtype([("s0", "<f8"), ("s1", "<f8"), ("s2", "<f8"), ("s3", "<f8"), ("valid", "u1")])
JONES_DTYPE = np.dtype(
    [("t_s", "<f8"), ("m", "<f8", (8,)), ("power", "<f8"), ("valid", "u1")]
)
CSV_COLUMNS = ("t_s", "s0", "s1", "s2", "s3", "valid")
ALARM_COLUMNS = ("t_s", "class", "band", "score", "run_length_s")


class SopFormatError(ValueError):
    """A data file that is malformed, truncated or of an unknown version."""


# ----------------------------------------------------------------------------
# framing
# ----------------------------------------------------------------------------


def _prefix(magic: bytes, header: dict) -> bytes:
    text = json.dumps(header, sort_keys=True).encode()
    return magic + struct.pack("<HI", FORMAT_VERSION, len(text)) + text


def _read_prefix(path: Path, magic: bytes) -> tuple[dict, int]:
    with open(path, "rb") as fh:
        head = fh.read(10)
        if len(head) == 0:
            raise SopFormatError(f"{path}: file is empty")
        if len(head) < 10 or head[:4] != magic:
            raise SopFormatError(f"{path}: not a {magic.decode()} file")
        version, hlen = struct.unpack("<HI", head[4:10])
        if version != FORMAT_VERSION:
            raise SopFormatError(f"{path}: unsupported format version {version} (expected {FORMAT_VERSION})")
        raw = fh.read(hlen)
        if len(raw) != hlen:
            raise SopFormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SopFormatError(f"{path}: corrupt header ({exc})") from None
    return header, 10 + hlen


def sop_header(n: int, sample_period_s: float, start_t_s: float, scenario_sha256: str = "") -> dict:
    return {
        "n_samples": int(n),
        "sample_period_s": float(sample_period_s),
        "start_t_s": float(start_t_s),
        "launch": LAUNCH_DESCRIPTION,
        "stokes_convention": STOKES_CONVENTION,
        "scenario_sha256": scenario_sha256,
    }


# ----------------------------------------------------------------------------
# SOP binary
# ----------------------------------------------------------------------------


def _records(series: SopSeries) -> np.ndarray:
    rec = np.empty(len(series), dtype=SOP_DTYPE)
    for i, name in enumerate(("s0", "s1", "s2", "s3")):
        rec[name] = series.stokes[:, i]
    rec["valid"] = series.valid_mask()
    return rec


def write_sop_binary(path, source, scenario_sha256: str = "", chunk: int = 1_000_000) -> None:
    """Write a series (or any lazily sliced source) chunk by chunk."""
    n = len(source)
    with open(path, "wb") as fh:
        fh.write(_prefix(SOP_MAGIC, sop_header(n, source.sample_period_s, source.start_t_s, scenario_sha256)))
        for i0 in range(0, n, chunk):
            fh.write(_records(source.slice(i0, min(n, i0 + chunk))).tobytes())


class SopFile:
    """Memory-mapped SOP record file with the series slicing interface."""

    def __init__(self, path):
        self.path = Path(path)
        self.header, offset = _read_prefix(self.path, SOP_MAGIC)
        try:
            self.n = int(self.header["n_samples"])
            self.sample_period_s = float(self.header["sample_period_s"])
            self.start_t_s = float(self.header["start_t_s"])
        except (KeyError, TypeError, ValueError) as exc:
            raise SopFormatError(f"{self.path}: header lacks {exc}") from None
        if not self.sample_period_s > 0:
            raise SopFormatError(f"{self.path}: sample_period_s must be positive")
        size = self.path.stat().st_size
        expected = offset + self.n * SOP_DTYPE.itemsize
        if size < expected:
            raise SopFormatError(
                f"{self.path}: truncated payload ({size - offset} of {self.n * SOP_DTYPE.itemsize} bytes)"
            )
        if size > expected:
            raise SopFormatError(f"{self.path}: {size - expected} trailing bytes after declared payload")
        if self.n:
            self._rec = np.memmap(self.path, dtype=SOP_DTYPE, mode="r", offset=offset, shape=(self.n,))
        else:
            self._rec = np.zeros(0, dtype=SOP_DTYPE)

    def __len__(self) -> int:
        return self.n

    @property
    def scenario_sha256(self) -> str:
        return str(self.header.get("scenario_sha256", ""))

    def slice(self, i0: int, i1: int) -> SopSeries:
        rec = np.asarray(self._rec[i0:i1])
        stokes = np.stack([rec["s0"], rec["s1"], rec["s2"], rec["s3"]], axis=1).astype(float)
        return SopSeries(self.sample_period_s, self.start_t_s + i0 * self.sample_period_s, stokes, rec["valid"] != 0)

    def valid_mask(self) -> np.ndarray:
        return np.asarray(self._rec["valid"]) != 0

    def read(self) -> SopSeries:
        return self.slice(0, self.n)


def read_sop_binary(path) -> SopSeries:
    return SopFile(path).read()


# ----------------------------------------------------------------------------
# SOP CSV
# ----------------------------------------------------------------------------


def write_sop_csv(path, series: SopSeries, scenario_sha256: str = "") -> None:
    header = sop_header(len(series), series.sample_period_s, series.start_t_s, scenario_sha256)
    t = series.times()
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for key in sorted(header):
            fh.write(f"# {key}: {json.dumps(header[key])}\n")
        fh.write(",".join(CSV_COLUMNS) + "\n")
        data = np.column_stack([t, series.stokes])
        buf = io.StringIO()
        np.savetxt(buf, data, fmt="%.17g", delimiter=",")
        lines = buf.getvalue().splitlines()
        flags = series.valid_mask().astype(int)
        fh.writelines(f"{line},{v}\n" for line, v in zip(lines, flags))


def read_sop_csv(path) -> SopSeries:
    path = Path(path)
    meta = {}
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise SopFormatError(f"{path}: file is empty")
    body = 0
    for body, line in enumerate(lines):
        if not line.startswith("#"):
            break
        key, _, value = line[1:].partition(":")
        meta[key.strip()] = json.loads(value.strip())
    if lines[body].split(",") != list(CSV_COLUMNS):
        raise SopFormatError(f"{path}: expected header {','.join(CSV_COLUMNS)}")
    rows = [r for r in lines[body + 1 :] if r]
    try:
        n = int(meta["n_samples"])
        dt = float(meta["sample_period_s"])
        t0 = float(meta["start_t_s"])
    except (KeyError, ValueError) as exc:
        raise SopFormatError(f"{path}: metadata lacks {exc}") from None
    if len(rows) != n:
        raise SopFormatError(f"{path}: declares {n} samples but holds {len(rows)}")
    if n == 0:
        return SopSeries(dt, t0, np.zeros((0, 4)), np.zeros(0, bool))
    data = np.array([[float(v) for v in r.split(",")] for r in rows])
    if data.shape[1] != len(CSV_COLUMNS):
        raise SopFormatError(f"{path}: rows must have {len(CSV_COLUMNS)} fields")
    return SopSeries(dt, t0, data[:, 1:5], data[:, 5] != 0)


def open_sop(path):
    """Binary files open memory-mapped; CSV files are read fully."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == SOP_MAGIC:
        return SopFile(path)
    if not magic:
        raise SopFormatError(f"{path}: file is empty")
    return read_sop_csv(path)


# ----------------------------------------------------------------------------
# Jones series
# ----------------------------------------------------------------------------


def write_jones_binary(path, js: JonesSeries, scenario_sha256: str = "") -> None:
    rec = np.empty(len(js), dtype=JONES_DTYPE)
    rec["t_s"] = js.t_s
    m = js.matrices.reshape(-1, 4)
    rec["m"] = np.stack([m.real, m.imag], axis=-1).reshape(-1, 8)
    rec["power"] = js.power
    rec["valid"] = js.valid
    header = {
        "n_entries": len(js),
        "sample_period_s": float(js.sample_period_s),
        "scenario_sha256": scenario_sha256,
        "layout": "xx, xy, yx, yy as (re, im)",
    }
    with open(path, "wb") as fh:
        fh.write(_prefix(JONES_MAGIC, header))
        fh.write(rec.tobytes())


def read_jones_binary(path) -> JonesSeries:
    path = Path(path)
    header, offset = _read_prefix(path, JONES_MAGIC)
    n = int(header["n_entries"])
    payload = path.read_bytes()[offset:]
    if len(payload) != n * JONES_DTYPE.itemsize:
        raise SopFormatError(f"{path}: payload size does not match {n} entries")
    rec = np.frombuffer(payload, dtype=JONES_DTYPE)
    m = rec["m"].reshape(-1, 4, 2)
    mats = (m[..., 0] + 1j * m[..., 1]).reshape(-1, 2, 2)
    return JonesSeries(float(header["sample_period_s"]), rec["t_s"].copy(), mats, rec["valid"] != 0, rec["power"].copy())


# ----------------------------------------------------------------------------
# tables
# ----------------------------------------------------------------------------


def write_spectrogram_csv(path, spec: Spectrogram) -> None:
    """First row: bin frequencies (Hz); first column: frame times (s); cells in dB."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("t_s\\f_hz," + ",".join(f"{f:.10g}" for f in spec.freq_bins_hz) + "\n")
        if len(spec):
            data = np.column_stack([spec.frame_times_s, spec.magnitude_db])
            np.savetxt(fh, data, fmt="%.10g", delimiter=",")


def read_spectrogram_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns ``(frame_times_s, freq_bins_hz, magnitude_db)``."""
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().rstrip("\n").split(",")
        freqs = np.array([float(v) for v in first[1:]])
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    if data.size == 0:
        return np.zeros(0), freqs, np.zeros((0, len(freqs)))
    return data[:, 0], freqs, data[:, 1:]


def write_alarms_csv(path, alarms: list[Alarm]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ALARM_COLUMNS)
        for a in alarms:
            w.writerow([f"{a.t_s:.6f}", a.kind, a.band, f"{a.score:.6f}", f"{a.run_length_s:.6f}"])


def read_alarms_csv(path) -> list[Alarm]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != ALARM_COLUMNS:
        raise SopFormatError(f"{path}: expected header {','.join(ALARM_COLUMNS)}")
    return [Alarm(float(r[0]), r[1], float(r[3]), r[2], float(r[4])) for r in rows[1:]]


def write_deviation_csv(path, t_s: np.ndarray, dev: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("t_s,dS1,dS2,dS3\n")
        if len(t_s):
            np.savetxt(fh, np.column_stack([t_s, dev]), fmt="%.10g", delimiter=",")


def write_features_csv(path, t_s: np.ndarray, bands, energy_db: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("t_s," + ",".join(f"{b}_db" for b in bands) + "\n")
        if len(t_s):
            np.savetxt(fh, np.column_stack([t_s, energy_db]), fmt="%.10g", delimiter=",")


# ----------------------------------------------------------------------------
# manifest
# ----------------------------------------------------------------------------


def sha256_file(path, block: int = 1 << 22) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        while chunk := fh.read(block):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, info: dict, files: list) -> Path:
    """``manifest.json`` listing inputs/config plus each output's size and hash.

    Paths are stored relative to ``out_dir``; nothing time-dependent is
    recorded, so identical runs give identical manifests.
    """
    out_dir = Path(out_dir)
    entries = []
    for f in files:
        p = Path(f)
        entries.append(
            {"path": os.path.relpath(p, out_dir), "bytes": p.stat().st_size, "sha256": sha256_file(p)}
        )
    doc = dict(info)
    doc["outputs"] = sorted(entries, key=lambda e: e["path"])
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# ----------------------------------------------------------------------------
# plots
# ----------------------------------------------------------------------------


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    # fixed element ids keep reruns byte-identical
    matplotlib.rcParams["svg.hashsalt"] = "sopsense"
    return plt


def _save_svg(fig, path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})


def plot_spectrogram_svg(path, spec: Spectrogram, title: str = "") -> None:
    """Spectrogram image (time vs frequency, dB)."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(8, 4))
    if len(spec):
        db = spec.magnitude_db
        finite = db[db > -250]
        vmax = float(finite.max()) if finite.size else 0.0
        im = ax.pcolormesh(
            spec.frame_times_s, spec.freq_bins_hz, db.T, shading="nearest", vmin=vmax - 80, vmax=vmax, rasterized=True
        )
        fig.colorbar(im, ax=ax, label="power (dB)")
    ax.set_xlabel("time (s)")
    ax.set_ylabel("frequency (Hz)")
    ax.set_title(title)
    fig.tight_layout()
    _save_svg(fig, path)
    plt.close(fig)


def _envelope(t: np.ndarray, y: np.ndarray, max_points: int) -> tuple[np.ndarray, np.ndarray]:
    """Min/max envelope so that short impulses survive plot thinning."""
    if len(t) <= max_points:
        return t, y
    step = -(-len(t) // (max_points // 2))
    n = (len(t) // step) * step
    yb = y[:n].reshape(-1, step)
    tb = t[:n:step]
    return np.repeat(tb, 2), np.column_stack([yb.min(1), yb.max(1)]).ravel()


def plot_deviation_svg(path, t_s: np.ndarray, dev: np.ndarray, title: str = "", max_points: int = 20_000) -> None:
    """Stacked Stokes deviation traces (thinned to a min/max envelope)."""
    plt = _pyplot()
    fig, axes = plt.subplots(3, 1, sharex=True, figsize=(8, 5))
    for k, ax in enumerate(axes):
        if len(t_s):
            ax.plot(*_envelope(t_s, dev[:, k], max_points), lw=0.5)
        ax.set_ylabel(f"dS{k + 1}")
    axes[-1].set_xlabel("time (s)")
    axes[0].set_title(title)
    fig.tight_layout()
    _save_svg(fig, path)
    plt.close(fig)
