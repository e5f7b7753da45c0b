import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sopsense.channel import (
    NoiseSpec,
    SopDirectSource,
    add_noise,
    apply_jones,
    apply_to_block,
    jones_at,
    sop_at,
    sop_direct_series,
)
from sopsense.scenario import EVENT_PARAMS, ChannelEvent, EventScript, builtin_preset
from sopsense.sop import rotation_jones
from sopsense.waveform import DualPolBlock


def _event(kind, start, duration, **params):
    p = {k: (list(v) if isinstance(v, list) else v) for k, v in EVENT_PARAMS[kind].items()}
    p.update(params)
    return ChannelEvent(kind, float(start), float(duration), p)


def _block(n, seed=0, fs=1e4):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n) + 1j * rng.normal(size=n)
    y = rng.normal(size=n) + 1j * rng.normal(size=n)
    return DualPolBlock(x / 2, y / 2, fs)


BREAK_DEMO = builtin_preset("break-demo")


def test_empty_script_is_identity():
    s = EventScript(0, 10.0, ())
    np.testing.assert_array_equal(jones_at(s, 3.3), np.eye(2))


def test_mains_rotation_at_quarter_period():
    s = EventScript(0, 1.0, (_event("mains_tone", 0, math.inf, harmonic_peaks_rad=[0.1]),))
    j = jones_at(s, 0.005)
    np.testing.assert_allclose(j, rotation_jones([0, 0, 1], 0.1), atol=1e-15)
    # the Stokes image is turned by 0.1 rad about S3
    np.testing.assert_allclose(sop_at(s, 0.005)[0], [1, math.cos(0.1), math.sin(0.1), 0], atol=1e-15)


def test_break_demo_end_power():
    j = jones_at(BREAK_DEMO, BREAK_DEMO.total_duration_s)
    post = 10 ** (BREAK_DEMO.break_event()["post_power_db"] / 10)
    assert np.linalg.norm(j, 2) ** 2 <= post * (1 + 1e-9)


def test_out_of_range_time():
    with pytest.raises(ValueError):
        jones_at(BREAK_DEMO, -1.0)
    with pytest.raises(ValueError):
        jones_at(BREAK_DEMO, 1201.0)


def test_repeatable_evaluation():
    t = np.array([0.5, 777.77, 1189.9])
    a = jones_at(BREAK_DEMO, t)
    b = jones_at(BREAK_DEMO, t[::-1])[::-1]
    np.testing.assert_array_equal(a, b)


@settings(max_examples=40, deadline=None)
@given(st.floats(0, BREAK_DEMO.break_completion_s() - 1e-6))
def test_unitary_before_break(t):
    j = jones_at(BREAK_DEMO, t)
    np.testing.assert_allclose(j @ j.conj().T, np.eye(2), atol=1e-9)


def test_zero_amplitude_event_drops_out_exactly():
    mains = _event("mains_tone", 0, math.inf)
    drift = _event("drift", 0, math.inf)
    quiet = _event("burst", 10, 50, peak_rate_rad_s=0.0)
    t = np.linspace(0, 100, 20001)
    base = EventScript(5, 100.0, (drift, mains))
    with_quiet = EventScript(5, 100.0, (drift, mains, quiet))
    np.testing.assert_array_equal(jones_at(base, t), jones_at(with_quiet, t))


def test_identity_series_is_constant():
    s = sop_direct_series(EventScript(0, 1.0, ()))
    assert len(s) == 10_000
    np.testing.assert_array_equal(s.stokes, np.tile([1.0, 1, 0, 0], (10_000, 1)))
    assert s.valid.all()


def test_series_length_is_floor():
    src = SopDirectSource(EventScript(0, 1.00005, ()))
    assert len(src) == 10_000
    with pytest.raises(ValueError):
        SopDirectSource(EventScript(0, 1.0, ()), 0.0)


def test_mains_only_s2_peaks_at_50hz():
    s = sop_direct_series(builtin_preset("mains-only"))
    n = 20_000
    s2 = s.stokes[:n, 2] - s.stokes[:n, 2].mean()
    t = np.arange(n) * s.sample_period_s
    # brute-force DFT magnitude at every integer frequency up to 400 Hz
    freqs = np.arange(1, 401)
    mag = np.abs(np.exp(-2j * np.pi * freqs[:, None] * t[None, :]) @ s2)
    assert freqs[np.argmax(mag)] == 50


def test_break_demo_validity_ends_at_completion():
    src = SopDirectSource(BREAK_DEMO)
    valid = src.valid_mask()
    last = np.flatnonzero(valid)[-1] * src.sample_period_s
    completion = BREAK_DEMO.break_completion_s()
    assert completion - src.sample_period_s <= last < completion
    assert not valid[np.flatnonzero(valid)[-1] + 1 :].any()
    tail = src.slice(len(src) - 10, len(src))
    assert np.all(tail.stokes[:, 1:] == 0) and np.all(tail.stokes[:, 0] > 0)


def test_fully_polarized_before_break():
    src = SopDirectSource(BREAK_DEMO)
    chunk = src.slice(7_700_000, 7_800_000)
    s = chunk.stokes
    np.testing.assert_allclose(np.sum(s[:, 1:] ** 2, axis=1), s[:, 0] ** 2, atol=1e-9)


def test_slices_agree_with_full_series():
    s = EventScript(3, 20.0, (_event("drift", 0, math.inf), _event("mains_tone", 0, math.inf)))
    full = sop_direct_series(s)
    src = SopDirectSource(s)
    part = src.slice(12_345, 67_890)
    np.testing.assert_array_equal(part.stokes, full.stokes[12_345:67_890])


def test_drift_energy_below_1hz():
    s = EventScript(11, 600.0, (_event("drift", 0, math.inf),))
    series = sop_direct_series(s, 1e-2)
    s2 = series.stokes[:, 2] - series.stokes[:, 2].mean()
    p = np.abs(np.fft.rfft(s2)) ** 2
    f = np.fft.rfftfreq(len(s2), 1e-2)
    assert p[f < 1.0].sum() / p.sum() >= 0.95


def test_apply_identity_is_bit_exact():
    b = _block(1000)
    out = apply_to_block(EventScript(0, 1.0, ()), b)
    np.testing.assert_array_equal(out.x, b.x)
    np.testing.assert_array_equal(out.y, b.y)


def test_apply_unitary_preserves_energy():
    b = _block(10_000)
    out = apply_to_block(BREAK_DEMO, DualPolBlock(b.x, b.y, b.sample_rate_hz, 800.0))
    e_in = np.sum(np.abs(b.x) ** 2 + np.abs(b.y) ** 2)
    e_out = np.sum(np.abs(out.x) ** 2 + np.abs(out.y) ** 2)
    assert abs(e_out / e_in - 1) < 1e-9


def test_90_degree_rotation_moves_x_to_y():
    b = DualPolBlock(np.ones(8, complex), np.zeros(8, complex), 1.0)
    out = apply_jones(b, np.array([[0, -1], [1, 0]]))
    np.testing.assert_array_equal(out.x, 0)
    np.testing.assert_array_equal(np.abs(out.y), 1)


def test_apply_out_of_range():
    b = _block(100, fs=10.0)
    with pytest.raises(ValueError):
        apply_to_block(EventScript(0, 5.0, ()), b)


def test_noise_disabled_passthrough():
    b = _block(100)
    assert add_noise(b, NoiseSpec(10.0, enabled=False), 1) is b


def test_noise_snr_and_determinism():
    fs = 2e6
    n = 1_000_000
    rng = np.random.default_rng(9)
    phases = np.exp(0.5j * np.pi * rng.integers(0, 4, size=(2, n))) / math.sqrt(2)
    b = DualPolBlock(phases[0], phases[1], fs)
    spec = NoiseSpec.for_snr(20.0, fs)
    assert spec.snr_db(fs) == pytest.approx(20.0)
    out = add_noise(b, spec, 42)
    noise_x = out.x - b.x
    measured = 10 * np.log10(np.mean(np.abs(b.x) ** 2) / np.mean(np.abs(noise_x) ** 2))
    assert abs(measured - 20.0) < 0.2
    again = add_noise(b, spec, 42)
    np.testing.assert_array_equal(out.x, again.x)


def test_noise_needs_signal():
    b = DualPolBlock(np.zeros(10, complex), np.zeros(10, complex), 1.0)
    with pytest.raises(ValueError):
        add_noise(b, NoiseSpec(10.0), 0)
