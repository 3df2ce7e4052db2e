import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from subnyq.acquisition import ChannelFrame, ImagingConfig, add_noise, arrival_times, point_phantom, simulate_channels
from subnyq.das import das_line, delay_tau, envelope, envelope_log

C = 1540.0
CFG = ImagingConfig()


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1e-4), st.floats(-0.8, 0.8))
def test_delay_zero_offset_is_identity(t, theta):
    assert delay_tau(t, theta, 0.0, C) == pytest.approx(t, abs=1e-18)


def test_delay_broadside_closed_form():
    t = np.linspace(0, 8e-5, 50)
    d = 0.007
    np.testing.assert_allclose(delay_tau(t, 0.0, d, C), 0.5 * (t + np.sqrt(t**2 + 4 * (d / C) ** 2)), rtol=1e-14)


def test_delay_matches_arrival_model():
    z = 0.05
    cfg = ImagingConfig(element_count=8)
    dm = cfg.element_x()
    tau = delay_tau(2 * z / C, 0.0, dm, C)
    expected = arrival_times(point_phantom([(0.0, z)]), cfg)[:, 0]
    np.testing.assert_allclose(tau, expected, rtol=1e-13)


@pytest.mark.parametrize("theta", [-0.7, 0.0, 0.4])
@pytest.mark.parametrize("d", [-0.01, 0.0, 0.003])
def test_delay_monotone_and_bounded(theta, d):
    t = np.linspace(0, 1e-4, 2001)
    tau = delay_tau(t, theta, d, C)
    assert np.all(np.diff(tau) >= 0)
    assert np.all(tau >= t / 2)


def test_single_element_identity():
    cfg = ImagingConfig(element_count=1)
    rng = np.random.default_rng(0)
    frame = ChannelFrame(0.3, rng.standard_normal((1, cfg.samples_per_line)), cfg)
    np.testing.assert_allclose(das_line(frame).samples, frame.traces[0], atol=1e-12)


def test_on_axis_peak_sample():
    z = 0.04
    frame = simulate_channels(point_phantom([(0.0, z)]), CFG)
    peak = int(np.argmax(envelope(das_line(frame, 0.0).samples)))
    assert abs(peak - round(2 * z / C * CFG.fs_hz)) <= 1


def test_linearity():
    cfg = ImagingConfig(element_count=8)
    rng = np.random.default_rng(1)
    a = ChannelFrame(0.1, rng.standard_normal((8, cfg.samples_per_line)), cfg)
    b = ChannelFrame(0.1, rng.standard_normal((8, cfg.samples_per_line)), cfg)
    s = ChannelFrame(0.1, a.traces + b.traces, cfg)
    np.testing.assert_allclose(das_line(s).samples, das_line(a).samples + das_line(b).samples, atol=1e-12)


def _psr(x, center, half):
    env = envelope(x)
    side = np.concatenate([env[:center - half], env[center + half:]])
    return env[center] / side.max()


def test_array_gain_in_noise():
    z = 0.04
    frame = add_noise(simulate_channels(point_phantom([(0.0, z)]), CFG), 0.0, 5)
    line = das_line(frame, 0.0).samples
    center = round(2 * z / C * CFG.fs_hz)
    half = 2 * CFG.pulse().half_length
    arrivals = np.round(arrival_times(point_phantom([(0.0, z)]), CFG)[:, 0] * CFG.fs_hz).astype(int)
    psr_das = _psr(line, center, half)
    psr_channels = [_psr(frame.traces[m], arrivals[m], half) for m in range(CFG.element_count)]
    assert psr_das > max(psr_channels)


def test_envelope_of_tone_is_flat():
    n = 1920
    t = np.arange(n)
    env = envelope(3.0 * np.cos(2 * np.pi * 484 * t / n + 0.3))
    mid = env[100:-100]
    assert np.max(np.abs(mid - 3.0)) < 0.03


def test_envelope_log_zero_and_range():
    np.testing.assert_array_equal(envelope_log(np.zeros(64)), np.zeros(64))
    with pytest.raises(ValueError):
        envelope_log(np.ones(8), 0.0)


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-3, 1e3))
def test_envelope_log_scale_invariant(k):
    x = np.random.default_rng(2).standard_normal(256)
    a, b = envelope_log(x), envelope_log(k * x)
    np.testing.assert_allclose(a, b, atol=1e-9)
    assert a.min() >= 0 and a.max() == pytest.approx(1.0)
