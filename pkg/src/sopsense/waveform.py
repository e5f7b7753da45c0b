"""
Dual-polarization QPSK transmitter with root-raised-cosine shaping.

Batch helpers (:func:`pulse_shape`, :func:`matched_filter`) use a centered
("same") convolution: the output has exactly as many samples as the input
and sample ``k * sps`` is aligned with symbol ``k``.  The streaming
:class:`Transmitter` and :class:`MatchedFilter` run causal filters carrying
state between blocks; each adds a delay of ``span_symbols / 2`` symbols.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import signal

# {1, j, -1, -j}: unit modulus holds exactly in floating point
QPSK = np.array([1.0 + 0.0j, 0.0 + 1.0j, -1.0 + 0.0j, 0.0 - 1.0j])


@dataclass
class DualPolBlock:
    """Two complex sample streams (x and y polarizations) on a common clock."""

    x: np.ndarray
    y: np.ndarray
    sample_rate_hz: float
    t0_s: float = 0.0

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=complex)
        self.y = np.asarray(self.y, dtype=complex)
        if self.x.shape != self.y.shape:
            raise ValueError("x and y must have equal length")
        if not self.sample_rate_hz > 0:
            raise ValueError("sample_rate_hz must be positive")

    def __len__(self) -> int:
        return len(self.x)

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate_hz

    def stacked(self) -> np.ndarray:
        return np.stack([self.x, self.y])


@dataclass(frozen=True)
class TxConfig:
    """Transmitter settings.

    The desk default is 1 MBd; at 2 samples per symbol a 100 us SOP period
    then spans 100 symbols, the same channel-to-SOP-rate ratio as a 1 GBd
    system sampled every 100 us once the equalizer output is decimated.
    """

    symbol_rate_baud: float = 1e6
    oversampling: int = 2
    rrc_rolloff: float = 0.1
    seed: int = 0
    span_symbols: int = 96

    def __post_init__(self):
        if not self.symbol_rate_baud > 0:
            raise ValueError("symbol_rate_baud must be positive")
        if int(self.oversampling) != self.oversampling or self.oversampling < 2:
            raise ValueError("oversampling must be an integer >= 2")
        if not 0 < self.rrc_rolloff <= 1:
            raise ValueError("rrc_rolloff must lie in (0, 1]")
        if self.span_symbols < 2 or self.span_symbols % 2:
            raise ValueError("span_symbols must be an even integer >= 2")

    @property
    def sample_rate_hz(self) -> float:
        return self.symbol_rate_baud * self.oversampling


def rrc_taps(cfg: TxConfig) -> np.ndarray:
    """Unit-energy root-raised-cosine taps, ``span_symbols * sps + 1`` long."""
    sps = cfg.oversampling
    beta = cfg.rrc_rolloff
    t = np.arange(-cfg.span_symbols * sps // 2, cfg.span_symbols * sps // 2 + 1) / sps
    h = np.empty_like(t)
    zero = np.isclose(t, 0.0)
    sing = np.isclose(np.abs(t), 1 / (4 * beta))
    reg = ~(zero | sing)
    tr = t[reg]
    h[reg] = (
        np.sin(np.pi * tr * (1 - beta)) + 4 * beta * tr * np.cos(np.pi * tr * (1 + beta))
    ) / (np.pi * tr * (1 - (4 * beta * tr) ** 2))
    h[zero] = 1 - beta + 4 * beta / np.pi
    h[sing] = beta / math.sqrt(2) * (
        (1 + 2 / np.pi) * math.sin(np.pi / (4 * beta)) + (1 - 2 / np.pi) * math.cos(np.pi / (4 * beta))
    )
    return h / np.linalg.norm(h)


def generate_symbols(cfg: TxConfig, n: int, block: int = 0) -> np.ndarray:
    """Independent uniform QPSK symbols, shape ``(2, n)``.

    ``block`` selects an independent, reproducible stream so that long
    transmissions can be produced piecewise.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    rng = np.random.default_rng([cfg.seed, block])
    return QPSK[rng.integers(0, 4, size=(2, n))]


def _upsample(symbols: np.ndarray, sps: int) -> np.ndarray:
    up = np.zeros(symbols.shape[:-1] + (symbols.shape[-1] * sps,), dtype=complex)
    up[..., ::sps] = symbols
    return up


def _same(x: np.ndarray, h: np.ndarray) -> np.ndarray:
    full = signal.fftconvolve(x, h[None, :], axes=-1)
    d = (len(h) - 1) // 2
    return full[..., d : d + x.shape[-1]]


def pulse_shape(symbols: np.ndarray, cfg: TxConfig, t0_s: float = 0.0) -> DualPolBlock:
    """RRC-shaped waveform at ``oversampling`` samples per symbol, unit mean power.

    Output length is ``n * oversampling``; the filter tails beyond the
    symbol span are dropped.
    """
    symbols = np.asarray(symbols, dtype=complex)
    if symbols.ndim != 2 or symbols.shape[0] != 2 or symbols.shape[1] == 0:
        raise ValueError("symbols must have shape (2, n) with n > 0")
    sps = cfg.oversampling
    out = _same(_upsample(symbols, sps), rrc_taps(cfg) * math.sqrt(sps))
    return DualPolBlock(out[0], out[1], cfg.sample_rate_hz, t0_s)


def _check_rate(block: DualPolBlock, cfg: TxConfig) -> None:
    if not math.isclose(block.sample_rate_hz, cfg.sample_rate_hz, rel_tol=1e-9):
        raise ValueError(
            f"block sample rate {block.sample_rate_hz} Hz does not match {cfg.sample_rate_hz} Hz"
        )


def matched_filter(block: DualPolBlock, cfg: TxConfig) -> DualPolBlock:
    """Receive RRC (unit-energy taps), centered like :func:`pulse_shape`.

    After shaping and matching, sample ``k * sps`` equals
    ``sqrt(sps) * symbol[k]`` up to filter truncation; see :func:`sample_symbols`.
    """
    _check_rate(block, cfg)
    out = _same(block.stacked(), rrc_taps(cfg))
    return DualPolBlock(out[0], out[1], block.sample_rate_hz, block.t0_s)


def sample_symbols(block: DualPolBlock, cfg: TxConfig) -> np.ndarray:
    """Symbol-spaced decisions-ready samples ``(2, n)`` of a matched block."""
    sps = cfg.oversampling
    return block.stacked()[:, ::sps] / math.sqrt(sps)


def evm(received: np.ndarray, reference: np.ndarray, guard: int = 0) -> float:
    """RMS error vector magnitude relative to the reference RMS amplitude.

    ``guard`` symbols at both ends are excluded (filter edge effects).
    """
    r = np.asarray(received)[..., guard : received.shape[-1] - guard]
    s = np.asarray(reference)[..., guard : reference.shape[-1] - guard]
    return float(np.sqrt(np.mean(np.abs(r - s) ** 2) / np.mean(np.abs(s) ** 2)))


class _CausalFir:
    """FIR filter over consecutive blocks with carried state."""

    def __init__(self, taps: np.ndarray):
        self.taps = taps
        self.zi = np.zeros((2, len(taps) - 1), dtype=complex)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        out, self.zi = signal.lfilter(self.taps, [1.0], x, axis=-1, zi=self.zi)
        return out


class Transmitter:
    """Endless transmit waveform produced block by block.

    Block ``b`` carries ``symbols_per_block`` symbols from stream ``b`` of
    :func:`generate_symbols`.  The causal shaping filter delays the waveform
    by ``span_symbols / 2`` symbols relative to the symbol clock.
    """

    def __init__(self, cfg: TxConfig, symbols_per_block: int = 50_000):
        if symbols_per_block <= 0:
            raise ValueError("symbols_per_block must be positive")
        self.cfg = cfg
        self.symbols_per_block = symbols_per_block
        self.block_index = 0
        self.fir = _CausalFir(rrc_taps(cfg) * math.sqrt(cfg.oversampling))

    @property
    def delay_symbols(self) -> int:
        return self.cfg.span_symbols // 2

    def next_block(self, n_symbols: int | None = None) -> tuple[np.ndarray, DualPolBlock]:
        """Return ``(symbols, waveform)`` for the next block.

        ``n_symbols`` truncates the block (used for the final, partial block).
        """
        cfg = self.cfg
        sym = generate_symbols(cfg, self.symbols_per_block, self.block_index)
        if n_symbols is not None:
            sym = sym[:, :n_symbols]
        t0 = self.block_index * self.symbols_per_block / cfg.symbol_rate_baud
        wave = self.fir(_upsample(sym, cfg.oversampling))
        self.block_index += 1
        return sym, DualPolBlock(wave[0], wave[1], cfg.sample_rate_hz, t0)


class MatchedFilter:
    """Streaming counterpart of :func:`matched_filter` (causal, stateful).

    Output blocks are stamped ``span_symbols / 2`` symbols earlier than the
    input, so output sample times refer to the instant the matching input
    pulse peak was received.
    """

    def __init__(self, cfg: TxConfig):
        self.cfg = cfg
        self.fir = _CausalFir(rrc_taps(cfg))

    def __call__(self, block: DualPolBlock) -> DualPolBlock:
        _check_rate(block, self.cfg)
        out = self.fir(block.stacked())
        delay = self.cfg.span_symbols / 2 / self.cfg.symbol_rate_baud
        return DualPolBlock(out[0], out[1], block.sample_rate_hz, block.t0_s - delay)
