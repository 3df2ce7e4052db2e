import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from subnyq.acquisition import ChannelFrame, ImagingConfig, point_phantom, simulate_channels
from subnyq.coba import cfcoba_line, coba_double_sum, coba_line, lateral_autoconv, normalize_u
from subnyq.das import das_line, delayed_channels, envelope
from subnyq.fdbf import BandError, distortion_table, fourier_coeffs, in_band, to_time
from subnyq.geometry import ArrayGeometry, FractalSpec, fractal_array
from subnyq.metrics import fwhm

CFG = ImagingConfig()
SMALL = ImagingConfig(element_count=8, samples_per_line=480)


def test_normalize_examples():
    np.testing.assert_allclose(normalize_u(np.array([0.0, 4.0, -9.0])), [0, 2, -3], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(arrays(complex, 12, elements=st.complex_numbers(max_magnitude=1e3, allow_nan=False, allow_infinity=False)))
def test_normalize_magnitude_and_phase(x):
    u = normalize_u(x)
    np.testing.assert_allclose(np.abs(u) ** 2, np.abs(x), rtol=1e-12, atol=1e-12)
    nz = np.abs(x) > 1e-6
    np.testing.assert_allclose(np.exp(1j * np.angle(u[nz])), np.exp(1j * np.angle(x[nz])), atol=1e-9)


def _random_frame(rng, cfg=SMALL, theta=0.1):
    return ChannelFrame(theta, rng.standard_normal((cfg.element_count, cfg.samples_per_line)), cfg)


def test_single_element_restores_magnitude(rng):
    frame = _random_frame(rng)
    one = ArrayGeometry((3,), SMALL.pitch_m)
    out = coba_line(frame, one, normalize=False).samples
    ref = delayed_channels(frame, 0.1, [3])[0]
    np.testing.assert_allclose(out, ref**2, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_lateral_form_matches_double_sum(seed):
    rng = np.random.default_rng(seed)
    pos = np.sort(rng.choice(8, size=rng.integers(1, 9), replace=False))
    u = rng.standard_normal((pos.size, 50)) + 1j * rng.standard_normal((pos.size, 50))
    a = lateral_autoconv(u, pos).sum(axis=0)
    b = coba_double_sum(u)
    assert np.max(np.abs(a - b)) <= 1e-9 * np.max(np.abs(b))
    np.testing.assert_allclose(b, u.sum(axis=0) ** 2, rtol=1e-12, atol=1e-12)


def test_two_element_expansion(rng):
    u = rng.standard_normal((2, 30)) + 1j * rng.standard_normal((2, 30))
    s = lateral_autoconv(u, [0, 1]).sum(axis=0)
    np.testing.assert_allclose(s, u[0] ** 2 + 2 * u[0] * u[1] + u[1] ** 2, atol=1e-12)


def test_coba_is_square_of_sum(rng):
    frame = _random_frame(rng)
    arr = ArrayGeometry((0, 1, 3, 4), SMALL.pitch_m)
    out = coba_line(frame, arr, normalize=False).samples
    ref = delayed_channels(frame, 0.1, arr.positions).sum(axis=0) ** 2
    np.testing.assert_allclose(out, ref, rtol=1e-10, atol=1e-10)


def test_empty_or_oversized_array(rng):
    frame = _random_frame(rng)
    with pytest.raises(ValueError):
        coba_line(frame, None)
    with pytest.raises(ValueError):
        coba_line(frame, ArrayGeometry((0, 9), SMALL.pitch_m))


def test_fractal_mainlobe_narrower_than_das():
    arr = fractal_array(FractalSpec((0, 1), 4), CFG.pitch_m, CFG.element_count)
    frame = simulate_channels(point_phantom([(0.0, 0.04)]), CFG)
    angles = np.linspace(-0.12, 0.12, 97)
    ds = np.sin(angles[1]) - np.sin(angles[0])
    widths = []
    for img in (np.stack([das_line(frame, a, arr.positions).samples for a in angles]),
                np.stack([coba_line(frame, arr, a).samples for a in angles])):
        env = envelope(img)
        col = np.unravel_index(np.argmax(env), env.shape)[1]
        widths.append(fwhm(env[:, col], ds))
    assert widths[1] < widths[0]


# --- frequency-domain form --------------------------------------------------

def _coeffs(rng, cfg, k, m):
    return fourier_coeffs(rng.standard_normal((m, cfg.samples_per_line)), k, cfg.depth_time_s)


def test_cfcoba_single_element_is_temporal_autoconv(rng):
    cfg = ImagingConfig(element_count=1, samples_per_line=480)
    k = np.arange(100, 130)
    tab = distortion_table(cfg, 0.0, k, 2, 2, support=cfg.depth_time_s)
    ch = _coeffs(rng, cfg, k, 1)
    out = cfcoba_line(ch, tab, n_sn=3.0)
    # brute force: full two-sided autoconvolution of the delayed coefficients (Q is a delta)
    two_sided = {int(kk): v for kk, v in zip(k, ch.values[0])}
    two_sided.update({-int(kk): np.conj(v) for kk, v in zip(k, ch.values[0])})
    for kk, val in zip(out.indices, out.values):
        ref = sum(two_sided[p] * two_sided.get(int(kk) - p, 0.0) for p in two_sided)
        assert val == pytest.approx(3.0 * ref, abs=1e-12)


def test_cfcoba_nsn_and_quadratic_scaling(rng):
    cfg = SMALL
    k = np.arange(100, 130)
    tab = distortion_table(cfg, 0.2, k, 2, 2)
    ch = _coeffs(rng, cfg, k, 8)
    base = cfcoba_line(ch, tab)
    np.testing.assert_allclose(cfcoba_line(ch, tab, n_sn=2.0).values, 2 * base.values, rtol=1e-12)
    np.testing.assert_allclose(cfcoba_line(-1.7 * ch, tab).values, 1.7**2 * base.values, rtol=1e-10)


def test_cfcoba_padding_too_small(rng):
    k = np.arange(100, 110)
    tab = distortion_table(SMALL, 0.0, k, 1, 1)
    with pytest.raises(BandError, match="needs"):
        cfcoba_line(_coeffs(rng, SMALL, k, 8), tab, n_fft=100)


@pytest.mark.parametrize("theta", [0.0, 0.3])
def test_cfcoba_matches_unnormalized_coba(theta):
    arr = ArrayGeometry.ula(CFG.element_count, CFG.pitch_m)
    frame = simulate_channels(point_phantom([(0.04 * np.sin(theta), 0.04 * np.cos(theta)), (0.0, 0.03)]), CFG)
    mu = in_band(CFG.pulse(), CFG.samples_per_line)
    ch = fourier_coeffs(frame.traces, mu, CFG.depth_time_s)
    tab = distortion_table(CFG, theta, mu)
    out = cfcoba_line(ch, tab)
    est = to_time(out)[:: out.n_full // CFG.samples_per_line]
    ref = coba_line(frame, arr, theta, normalize=False).samples
    m = CFG.time_axis < tab.T_B_seconds
    assert np.linalg.norm((est - ref)[m]) / np.linalg.norm(ref[m]) <= 0.05
