import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from subnyq.acquisition import ImagingConfig
from subnyq.fdbf import BandError, FourierLine, fourier_coeffs, select_subsample
from subnyq.recovery import (FriOperator, build_operator, ista_batch, ista_solve, objective, preprocess_to_time,
                             reconstruct_line, soft_threshold, spectral_norm_sq)

CFG = ImagingConfig()
PULSE = CFG.pulse()
N = CFG.samples_per_line


@pytest.fixture(scope="module")
def op230():
    return build_operator(PULSE, select_subsample(PULSE, 230, N), N)


def _ls_oracle(op, y, support):
    A = op.matrix()[:, support]
    return np.linalg.lstsq(np.vstack([A.real, A.imag]), np.concatenate([y.real, y.imag]), rcond=None)[0]


def test_unit_response_spike_is_exponential():
    n, s0 = 64, 5
    op = FriOperator(np.ones(33), np.arange(33), n)
    a = np.zeros(n)
    a[s0] = 1.0
    np.testing.assert_allclose(op.forward(a), np.exp(-2j * np.pi * np.arange(33) * s0 / n), atol=1e-12)


def test_adjoint_identity(op230, rng):
    for _ in range(5):
        a = rng.standard_normal(N)
        y = rng.standard_normal(230) + 1j * rng.standard_normal(230)
        assert abs(np.real(np.vdot(y, op230.forward(a))) - a @ op230.adjoint(y)) < 1e-10


def test_zero_code_zero_coeffs(op230):
    assert not np.any(op230.forward(np.zeros(N)))


def test_matrix_matches_fast_forward(op230, rng):
    a = rng.standard_normal(N)
    np.testing.assert_allclose(op230.matrix() @ a, op230.forward(a), atol=1e-12)


def test_frequency_mode_matches_time_mode(op230, rng):
    code = np.zeros(N)
    code[rng.choice(np.arange(50, N - 50), 12, replace=False)] = rng.standard_normal(12)
    line = reconstruct_line(code, PULSE).samples
    ref = fourier_coeffs(line, op230.indices, CFG.depth_time_s).values
    assert np.max(np.abs(op230.forward(code) - ref)) <= 1e-9 * np.max(np.abs(ref))


def test_indices_beyond_half_band():
    with pytest.raises(BandError):
        FriOperator(np.ones(2), [0, 40], 64)


def test_preprocess_round_trip(rng):
    x = rng.standard_normal(256)
    line = fourier_coeffs(x, np.arange(129), 1.0)
    out = preprocess_to_time(line, 256)
    np.testing.assert_allclose(out, x, atol=1e-10)


def test_preprocess_empty_band():
    line = FourierLine(np.zeros(0, dtype=int), np.zeros(0), 1.0, 64)
    np.testing.assert_array_equal(preprocess_to_time(line, 64), np.zeros(64))


def test_preprocess_target_too_short():
    line = FourierLine([10, 20], [1.0, 1.0], 1.0, 64)
    with pytest.raises(BandError):
        preprocess_to_time(line, 39)


def test_preprocess_real_output(rng):
    k = np.arange(30, 90)
    line = FourierLine(k, rng.standard_normal(60) + 1j * rng.standard_normal(60), 1.0, 256)
    from subnyq.fdbf import full_spectrum

    full = np.fft.ifft(full_spectrum(line, 256)) * 256
    assert np.max(np.abs(full.imag)) < 1e-10 * np.max(np.abs(full.real))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_preprocess_projection_idempotent(seed):
    rng = np.random.default_rng(seed)
    mu = np.sort(rng.choice(np.arange(1, 129), 40, replace=False))
    x = rng.standard_normal(256)
    once = preprocess_to_time(fourier_coeffs(x, mu, 1.0), 256)
    twice = preprocess_to_time(fourier_coeffs(once, mu, 1.0), 256)
    np.testing.assert_allclose(twice, once, atol=1e-10)


def test_soft_threshold_examples():
    x = np.array([3.0, -3.0, 0.5, -1.0])
    np.testing.assert_array_equal(soft_threshold(x, 0.0), x)
    np.testing.assert_array_equal(soft_threshold(x, 1.0), [2.0, -2.0, 0.0, 0.0])
    with pytest.raises(ValueError):
        soft_threshold(x, -0.1)


def test_ista_zero_data(op230):
    res = ista_solve(np.zeros(230, dtype=complex), op230, lam=0.1, iters=20)
    assert not np.any(res.values)
    assert all(v == 0 for v in res.objective)


def test_ista_threshold_dominance(op230, rng):
    y = op230.forward(rng.standard_normal(N))
    lam = np.max(np.abs(op230.adjoint(y))) * 1.0001
    assert not np.any(ista_solve(y, op230, lam=lam, iters=30).values)


def test_ista_rejects_bad_step(op230):
    with pytest.raises(ValueError):
        ista_solve(np.zeros(230), op230, lam=0.1, step=0.0)


def test_ista_objective_monotone(op230, rng):
    code = np.zeros(N)
    code[[300, 700, 1500]] = [1.0, -0.6, 0.8]
    y = op230.forward(code) + 0.01 * (rng.standard_normal(230) + 1j * rng.standard_normal(230))
    obj = np.array(ista_solve(y, op230, iters=300).objective)
    assert np.all(np.diff(obj) <= 1e-12 * obj[0])


def test_dense_and_fast_paths_agree(rng):
    n = 128
    op = build_operator(ImagingConfig(samples_per_line=n).pulse(), np.arange(20, 40), n)
    y = op.forward(rng.standard_normal(n))
    lam = 0.05 * np.max(np.abs(op.adjoint(y)))
    step = 0.99 / spectral_norm_sq(op)
    fast = ista_solve(y, op, lam, step, iters=60).values
    dense = ista_solve(y, op.matrix(), lam, step, iters=60).values
    np.testing.assert_allclose(dense, fast, atol=1e-10)
    batch = ista_batch(np.stack([y, 2 * y]), op, 0.05, step, iters=60)
    np.testing.assert_allclose(batch[0], fast, atol=1e-10)
    np.testing.assert_allclose(batch[1], 2 * fast, atol=1e-10)


@pytest.mark.xfail(strict=True, reason="adjacent grid columns are ~0.98 coherent; plain ISTA needs thousands of "
                                       "iterations before the lasso support becomes a single spike")
def test_one_sparse_recovery_in_200_iterations():
    mu = select_subsample(PULSE, 64, N)
    op = build_operator(PULSE, mu, N)
    code = np.zeros(N)
    code[700] = 1.3
    y = op.forward(code)
    lam = 1e-3 * np.max(np.abs(op.adjoint(y)))
    x = ista_solve(y, op, lam, iters=200, track_objective=False).values
    assert np.array_equal(np.flatnonzero(x), [700])
    assert abs(x[700] - _ls_oracle(op, y, [700])[0]) <= 0.01 * 1.3


def test_one_sparse_converged_matches_lasso_closed_form(op230):
    # For a single active column the lasso minimizer is (a^H y - lam) / ||a||^2 on that column.
    code = np.zeros(N)
    code[700] = 1.3
    y = op230.forward(code)
    lam = 0.05 * np.max(np.abs(op230.adjoint(y)))
    x = ista_solve(y, op230, lam, iters=3000, track_objective=False).values
    a = op230.matrix()[:, 700]
    expected = (np.real(np.vdot(a, y)) - lam) / np.real(np.vdot(a, a))
    assert np.array_equal(np.flatnonzero(x), [700])
    assert x[700] == pytest.approx(expected, rel=1e-4)
    assert _ls_oracle(op230, y, [700])[0] == pytest.approx(1.3, rel=1e-10)


def test_reconstruct_spike_centered():
    code = np.zeros(400)
    code[150] = 1.0
    out = reconstruct_line(code, PULSE).samples
    L = PULSE.half_length
    np.testing.assert_allclose(out[150 - L:150 + L + 1], PULSE.samples, atol=1e-15)
    assert np.argmax(np.abs(out)) == 150


def test_reconstruct_linear(rng):
    a, b = rng.standard_normal(300), rng.standard_normal(300)
    lhs = reconstruct_line(2 * a - b, PULSE).samples
    np.testing.assert_allclose(lhs, 2 * reconstruct_line(a, PULSE).samples - reconstruct_line(b, PULSE).samples,
                               atol=1e-12)


def test_reconstruct_two_spikes_ratio():
    code = np.zeros(600)
    code[150], code[400] = 1.0, 0.5
    out = np.abs(reconstruct_line(code, PULSE).samples)
    ratio = out[100:200].max() / out[350:450].max()
    assert ratio == pytest.approx(2.0, rel=0.01)


@pytest.mark.parametrize("S", [1, 3, 5, 8])
def test_vandermonde_full_rank(S, rng):
    n = 1920
    delays = np.sort(rng.choice(n, S, replace=False))
    mu = np.arange(400, 400 + S + 1)
    V = np.exp(-2j * np.pi * np.outer(mu, delays) / n)
    assert np.linalg.svd(V, compute_uv=False).min() > 0
    assert np.linalg.matrix_rank(V) == S


def test_objective_value():
    A = np.eye(3)
    assert objective(A, np.array([1.0, 0, 0]), np.zeros(3), 0.5) == pytest.approx(0.5)
