"""
End-to-end processing chains built from the library modules.

Full-stack mode runs transmitter, channel, noise, matched filter and the
equalizer block by block so that hour-long scenarios stay within memory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .channel import NoiseSpec, add_noise, apply_jones, apply_to_block
from .detect import (
    CLASSES,
    BaselineError,
    BaselineModel,
    DetectConfig,
    LosDetector,
    classify_events,
    fit_baseline,
    score_stream,
)
from .equalizer import Equalizer, EqualizerConfig, JonesSeries, equalize_stream
from .scenario import EventScript
from .sop import LAUNCH_X, SopSeries, great_circle_angle, normalized, series_from_jones, stokes_from_jones
from .spectral import (
    POWER_FLOOR,
    PRESET_SPECTROGRAMS,
    BandFeatures,
    Decimator,
    NotchSpec,
    Spectrogram,
    SpectrogramPreset,
    StreamingSTFT,
    band_power,
    mains_guard,
    notch_with_context,
    usable_bands,
)
from .waveform import MatchedFilter, Transmitter, TxConfig, generate_symbols, matched_filter, pulse_shape

# 12 dB OSNR in a reference band scaled down with the 1000x slower desk
# symbol rate; gives ~20 dB per-sample SNR at 2 MS/s
DESK_NOISE = NoiseSpec(osnr_db=12.0, enabled=True, ref_bandwidth_hz=12.5e6)


class _SymbolHistory:
    """Transmitted symbols kept until the equalizer has aligned."""

    def __init__(self):
        self.blocks: list[np.ndarray] = []

    def __call__(self, i0: int, i1: int) -> np.ndarray:
        have = np.concatenate(self.blocks, axis=1) if self.blocks else np.zeros((2, 0), complex)
        out = np.zeros((2, i1 - i0), dtype=complex)
        lo, hi = max(i0, 0), min(i1, have.shape[1])
        if hi > lo:
            out[:, lo - i0 : hi - i0] = have[:, lo:hi]
        return out


def full_stack_jones(
    script: EventScript,
    tx: TxConfig = TxConfig(),
    eq: EqualizerConfig | None = None,
    noise: NoiseSpec = DESK_NOISE,
    noise_seed: int = 0,
    block_symbols: int = 50_000,
    duration_s: float | None = None,
) -> JonesSeries:
    """Simulate the transceiver over the script and return the Jones stream.

    Entry timestamps refer to channel time, i.e. the instant the Jones
    transfer acted on the corresponding received pulses.
    """
    eq = eq or EqualizerConfig(symbol_rate_baud=tx.symbol_rate_baud)
    if not math.isclose(eq.symbol_rate_baud, tx.symbol_rate_baud) or tx.oversampling % eq.taps_per_symbol:
        raise ValueError("equalizer and transmitter rates disagree")
    total = script.total_duration_s if duration_s is None else min(duration_s, script.total_duration_s)
    n_total = int(math.floor(total * tx.symbol_rate_baud + 1e-9))
    transmitter = Transmitter(tx, block_symbols)
    mf = MatchedFilter(tx)
    history = _SymbolHistory()
    equalizer = Equalizer(eq, history, nominal_lag=tx.span_symbols)
    parts = []
    done = 0
    while done < n_total:
        n = min(block_symbols, n_total - done)
        sym, wave = transmitter.next_block(n)
        if equalizer.alignment is None:
            history.blocks.append(sym)
        else:
            history.blocks.clear()
        rx = apply_to_block(script, wave)
        rx = add_noise(rx, noise, [noise_seed, transmitter.block_index], reference_power=1.0)
        _, entries = equalizer.process(mf(rx))
        parts.append(entries)
        done += n
    parts.append(equalizer.finish())
    return JonesSeries.concat(parts, eq.entry_period_s)


def full_stack_series(script: EventScript, launch=LAUNCH_X, **kwargs) -> SopSeries:
    """SOP series recovered through the full transceiver chain."""
    return series_from_jones(full_stack_jones(script, **kwargs), launch)


def static_channel_errors(
    jones: np.ndarray,
    snr_db: float | None = 20.0,
    n_symbols: int = 30_000,
    seed: int = 0,
    tx: TxConfig = TxConfig(),
    eq: EqualizerConfig | None = None,
) -> np.ndarray:
    """Great-circle SOP error (degrees) of every Jones entry for a fixed channel.

    One batch run of shaping, channel, noise (``None`` disables it),
    matched filtering and equalization.  Entry ``k`` covers symbols up to
    ``(k + 1) * decimation``; invalid entries are NaN.
    """
    eq = eq or EqualizerConfig(symbol_rate_baud=tx.symbol_rate_baud)
    sym = generate_symbols(replace(tx, seed=seed), n_symbols)
    rx = apply_jones(pulse_shape(sym, tx), jones)
    if snr_db is not None:
        rx = add_noise(rx, NoiseSpec.for_snr(snr_db, tx.sample_rate_hz), [seed, 1])
    _, js = equalize_stream(matched_filter(rx, tx), eq, sym)
    est = series_from_jones(js)
    err = np.full(len(js), np.nan)
    v = est.valid_mask()
    err[v] = np.degrees(great_circle_angle(est.stokes[v], stokes_from_jones(jones)))
    return err


# ----------------------------------------------------------------------------
# chunked analysis
# ----------------------------------------------------------------------------

COMPONENTS = ("S1", "S2", "S3")


@dataclass(frozen=True)
class AnalysisConfig:
    """Settings for :func:`analyze_series`.

    Detection features always use the ``event`` spectrogram framing on
    notched traces; ``notch`` and ``preset`` only affect the exported
    spectrograms.
    """

    notch: bool = True
    preset: str = "event"
    notch_spec_centers: tuple[float, ...] = (50.0, 100.0, 150.0)
    notch_width_hz: float = 1.5
    chunk_samples: int = 1_000_000
    deviation_rate_hz: float = 100.0
    ref_window_s: float = 10.0
    settle_s: float = 2.0
    energy_split_hz: float = 50.0
    # full-rate frame length for the energy-split statistic (about 105 s at 10 kHz)
    energy_window: int = 2**20
    # feature bins within this distance of any mains harmonic are ignored
    mains_guard_hz: float = 5.0
    mains_hz: float = 50.0


@dataclass
class Analysis:
    """Everything derived from one SOP series."""

    spectrograms: dict
    features: BandFeatures
    segment: np.ndarray
    deviation_t_s: np.ndarray
    deviation: np.ndarray
    energy_below: np.ndarray
    energy_total: np.ndarray
    los_t_s: float | None
    sample_period_s: float
    n_samples: int
    preset: str
    hop_s: float

    def energy_fraction_below(self) -> np.ndarray:
        """Per component share of post-notch fluctuation energy below the split frequency.

        Measured on full-rate, mean-removed frames of ``energy_window``
        samples; NaN when no segment is that long.
        """
        if not np.any(self.energy_total > 0):
            return np.full(3, np.nan)
        return self.energy_below / np.where(self.energy_total > 0, self.energy_total, 1.0)


def valid_segments(valid: np.ndarray) -> list[tuple[int, int]]:
    """Half-open index ranges of consecutive valid samples."""
    v = np.asarray(valid, dtype=np.int8)
    edges = np.diff(np.r_[0, v, 0])
    return list(zip(np.flatnonzero(edges == 1).tolist(), np.flatnonzero(edges == -1).tolist()))


class _SegmentChain:
    """Per-segment streaming state: feature STFTs and export STFTs."""

    def __init__(self, t0: float, fs: float, preset: SpectrogramPreset, want_export: bool, export_notched: bool):
        ev = PRESET_SPECTROGRAMS["event"]
        self.feature_stft = [StreamingSTFT(fs, ev.window_len, ev.hop, t0, ev.detrend) for _ in COMPONENTS]
        self.energy_stft = None
        self.export_notched = export_notched
        self.export = None
        self.decimators = None
        if want_export:
            fs_e = fs / preset.decimate
            # decimator output sample 0 coincides with input sample 0
            self.export = [StreamingSTFT(fs_e, preset.window_len, preset.hop, t0, preset.detrend) for _ in COMPONENTS]
            if preset.decimate > 1:
                self.decimators = [Decimator(preset.decimate) for _ in COMPONENTS]


def analyze_series(source, cfg: AnalysisConfig = AnalysisConfig(), detect_cfg: DetectConfig = DetectConfig()) -> Analysis:
    """Notch, spectrogram, band features, deviation traces and LOS in one pass.

    ``source`` is a :class:`~sopsense.sop.SopSeries` or anything with the
    same ``len``/``slice``/``valid_mask`` interface (e.g. a lazily evaluated
    ground truth or a memory-mapped file).  Samples are processed in chunks;
    each valid segment is filtered on its own so invalid gaps are never
    interpolated.
    """
    n = len(source)
    dt = float(source.sample_period_s)
    fs = 1.0 / dt
    t_start = float(source.start_t_s)
    preset = PRESET_SPECTROGRAMS[cfg.preset]
    notch = NotchSpec(cfg.notch_spec_centers, cfg.notch_width_hz, fs)
    pad = notch.pad_samples
    ev = PRESET_SPECTROGRAMS["event"]
    feat_freqs = np.fft.rfftfreq(ev.window_len, dt)
    harmonics = cfg.mains_hz * np.arange(1, int((fs / 2) // cfg.mains_hz) + 1)
    guard = mains_guard(harmonics, cfg.mains_guard_hz) if cfg.mains_guard_hz > 0 else []
    bands = usable_bands(feat_freqs, exclude=guard)
    if not bands:
        raise ValueError("no feature band is resolvable at this sample rate")
    feat_keep = feat_freqs <= ev.export_max_hz
    export_fs = fs / preset.decimate
    export_freqs = np.fft.rfftfreq(preset.window_len, 1.0 / export_fs)
    export_keep = export_freqs <= preset.export_max_hz
    energy_split = np.fft.rfftfreq(cfg.energy_window, dt) < cfg.energy_split_hz

    valid_all = np.asarray(source.valid_mask(), dtype=bool)
    segments = [s for s in valid_segments(valid_all) if s[1] - s[0] >= max(ev.window_len, 2 * notch.period_samples)]

    los = LosDetector(dt, t_start, detect_cfg)
    los_t = None
    ref = None
    dev_block = max(1, int(round(fs / cfg.deviation_rate_hz)))
    chunk = max(dev_block, (cfg.chunk_samples // dev_block) * dev_block)
    dev_t, dev_v = [], []
    feat_t, feat_p, feat_seg = [], [], []
    exports = {c: [] for c in COMPONENTS}
    e_below = np.zeros(3)
    e_total = np.zeros(3)
    chains: dict[int, _SegmentChain] = {}

    for i0 in range(0, n, chunk):
        i1 = min(n, i0 + chunk)
        r0, r1 = max(0, i0 - pad), min(n, i1 + pad)
        block = source.slice(r0, r1)
        comps = normalized(block.stokes)
        valid = block.valid_mask()
        core = slice(i0 - r0, i1 - r0)

        # loss of signal on raw power and validity
        if los_t is None:
            found = los.push(block.stokes[core, 0], valid[core])
            los_t = found if found is not None else los_t

        # deviation traces, block-averaged
        if ref is None:
            n_ref = int(round(cfg.ref_window_s / dt))
            if n_ref <= i1 - i0 and valid[core][:n_ref].all():
                ref = comps[core][:n_ref].mean(axis=0)
            else:
                raise ValueError("series has no full valid reference window")
        dev = comps[core] - ref
        dev[~valid[core]] = np.nan
        m = (i1 - i0) // dev_block
        if m:
            dev_v.append(dev[: m * dev_block].reshape(m, dev_block, 3).mean(axis=1))
            dev_t.append(t_start + (i0 + np.arange(m) * dev_block + (dev_block - 1) / 2) * dt)

        for k, (a, b) in enumerate(segments):
            lo, hi = max(a, i0), min(b, i1)
            if lo >= hi:
                continue
            if k not in chains:
                chains[k] = _SegmentChain(t_start + a * dt, fs, preset, True, cfg.notch)
                if b - a >= cfg.energy_window:
                    chains[k].energy_stft = [
                        StreamingSTFT(fs, cfg.energy_window, cfg.energy_window, t_start + a * dt, "constant")
                        for _ in COMPONENTS
                    ]
            chain = chains[k]
            left = comps[max(a, r0) - r0 : lo - r0]
            right = comps[hi - r0 : min(b, r1) - r0]
            x = comps[lo - r0 : hi - r0]
            for c in range(3):
                y = notch_with_context(x[:, c], notch, left[:, c], right[:, c])
                if chain.energy_stft is not None:
                    sg_w = chain.energy_stft[c].push(y)
                    if len(sg_w):
                        e_below[c] += sg_w.power[:, energy_split].sum()
                        e_total[c] += sg_w.power.sum()
                sg = chain.feature_stft[c].push(y)
                if len(sg):
                    if c == 0:
                        feat_t.append(sg.frame_times_s)
                        feat_seg.append(np.full(len(sg), k))
                        acc = np.zeros((len(sg), len(bands)))
                    acc += band_power(sg, bands, guard)
                    if c == 2:
                        feat_p.append(acc)
                    if cfg.preset == "event" and cfg.notch:
                        exports[COMPONENTS[c]].append(sg.power[:, feat_keep])
                if cfg.preset == "event" and cfg.notch:
                    continue
                trace = y if cfg.notch else x[:, c]
                if chain.decimators is not None:
                    trace = chain.decimators[c].push(trace)
                    if hi == b:
                        trace = np.concatenate([trace, chain.decimators[c].finish()])
                sg_e = chain.export[c].push(trace)
                if len(sg_e):
                    exports[COMPONENTS[c]].append((sg_e.frame_times_s, sg_e.power[:, export_keep]))
    if los_t is None:
        los_t = los.finish()

    spectrograms = {}
    for c in COMPONENTS:
        parts = exports[c]
        if cfg.preset == "event" and cfg.notch:
            times = np.concatenate(feat_t) if feat_t else np.zeros(0)
            power = np.concatenate(parts) if parts else np.zeros((0, int(feat_keep.sum())))
            spectrograms[c] = Spectrogram(times, feat_freqs[feat_keep], power, ev.window_len, ev.hop)
        else:
            times = np.concatenate([p[0] for p in parts]) if parts else np.zeros(0)
            power = np.concatenate([p[1] for p in parts]) if parts else np.zeros((0, int(export_keep.sum())))
            spectrograms[c] = Spectrogram(times, export_freqs[export_keep], power, preset.window_len, preset.hop)

    t = np.concatenate(feat_t) if feat_t else np.zeros(0)
    p = np.concatenate(feat_p) if feat_p else np.zeros((0, len(bands)))
    seg = np.concatenate(feat_seg) if feat_seg else np.zeros(0, dtype=np.int64)
    seg_start = np.array([t_start + segments[k][0] * dt for k in seg]) if len(seg) else np.zeros(0)
    keep = t >= seg_start + cfg.settle_s
    features = BandFeatures(t[keep], tuple(bands), 10 * np.log10(np.maximum(p[keep], POWER_FLOOR)), bands)
    return Analysis(
        spectrograms,
        features,
        seg[keep],
        np.concatenate(dev_t) if dev_t else np.zeros(0),
        np.concatenate(dev_v) if dev_v else np.zeros((0, 3)),
        e_below,
        e_total,
        los_t,
        dt,
        n,
        cfg.preset,
        ev.hop * dt,
    )


@dataclass
class Detection:
    alarms: list
    model: BaselineModel
    scores: np.ndarray

    def counts(self) -> dict:
        return {k: sum(a.kind == k for a in self.alarms) for k in CLASSES}


def training_features(analysis: Analysis, train_s: float) -> BandFeatures:
    """Frames from the first ``train_s`` seconds of the first valid segment."""
    f = analysis.features
    if not len(f):
        raise BaselineError("no feature frames available for training")
    first = analysis.segment == analysis.segment[0]
    keep = first & (f.t_s < f.t_s[0] + train_s)
    return BandFeatures(f.t_s[keep], f.bands, f.energy_db[keep], f.edges_hz)


def detect_events(
    analysis: Analysis,
    model: BaselineModel | None = None,
    train_s: float = 300.0,
    cfg: DetectConfig = DetectConfig(),
) -> Detection:
    """Score the analysis features and classify alarms (training on the head if no model)."""
    if model is None:
        model = fit_baseline(training_features(analysis, train_s), cfg.min_scale_db, analysis.hop_s)
    z = score_stream(analysis.features, model)
    alarms = classify_events(z, analysis.features, cfg, analysis.los_t_s, analysis.segment, analysis.hop_s)
    return Detection(alarms, model, z)
