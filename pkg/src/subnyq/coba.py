"""Convolutional beamforming in time (COBA) and its compressed Fourier form (CFCOBA)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import hilbert

from .acquisition import ChannelFrame
from .das import BeamLine, delayed_channels
from .fdbf import BandError, DistortionTable, FourierLine, delayed_coeffs
from .geometry import ArrayGeometry, sum_coarray


@dataclass
class NormalizedChannels:
    theta_rad: float
    u: np.ndarray
    positions: np.ndarray


def normalize_u(delayed) -> np.ndarray:
    """``exp(j angle(x)) * sqrt(|x|)`` elementwise."""
    x = np.asarray(delayed)
    return np.exp(1j * np.angle(x)) * np.sqrt(np.abs(x))


def _grid(u: np.ndarray, positions) -> np.ndarray:
    pos = np.asarray(positions)
    g = np.zeros((pos.max() + 1,) + u.shape[1:], dtype=complex)
    g[pos] = u
    return g


def lateral_autoconv(u: np.ndarray, positions) -> np.ndarray:
    """``s_n = sum_{i + j = n} u_i u_j`` per sample, via zero-padded FFT over the element axis."""
    g = _grid(u, positions)
    width = 2 * g.shape[0] - 1
    f = np.fft.fft(g, n=width, axis=0)
    return np.fft.ifft(f * f, axis=0)


def coba_double_sum(u: np.ndarray) -> np.ndarray:
    """Reference ``sum_n sum_m u_n u_m`` written as the explicit double loop."""
    out = np.zeros(u.shape[1:], dtype=complex)
    for a in u:
        for b in u:
            out += a * b
    return out


def normalized_channels(frame: ChannelFrame, array: ArrayGeometry, theta: float | None = None) -> NormalizedChannels:
    theta = frame.theta_rad if theta is None else theta
    delayed = delayed_channels(frame, theta, array.positions)
    return NormalizedChannels(float(theta), normalize_u(hilbert(delayed, axis=-1)), np.asarray(array.positions))


def coba_line(frame: ChannelFrame, array: ArrayGeometry, theta: float | None = None,
              normalize: bool = True) -> BeamLine:
    """Convolutionally beamformed line over the sum co-array of ``array``.

    With ``normalize`` the analytic delayed channels pass through :func:`normalize_u`
    and the real part of the per-sample total is returned.  Without it, the real
    delayed channels are used as they are, giving ``(sum_m phi_m)**2``.
    """
    if array is None or len(array.positions) == 0:
        raise ValueError("COBA needs at least one element")
    if max(array.positions) >= frame.config.element_count:
        raise ValueError("array positions exceed the recorded elements")
    theta = frame.theta_rad if theta is None else theta
    if normalize:
        u = normalized_channels(frame, array, theta).u
    else:
        u = delayed_channels(frame, theta, array.positions).astype(complex)
    s = lateral_autoconv(u, array.positions)
    return BeamLine(float(theta), np.real(s.sum(axis=0)), frame.config.fs_hz)


def cfcoba_line(channels: FourierLine, table: DistortionTable, n_sn: float = 1.0,
                n_fft: int | None = None) -> FourierLine:
    """Coefficients of the unnormalized convolutional beam from per-element Fourier data.

    The delayed coefficients (elements x harmonics, negative side restored by conjugate
    symmetry) are autoconvolved in two dimensions, over harmonics and over element
    positions, using zero-padded FFTs; the result is summed over the sum co-array and
    scaled by ``n_sn``.  The double-width output band needs a grid of at least
    ``4 * kmax + 1`` points; it is placed on the smallest multiple of the input line
    length that holds it.  Under the coefficient convention of :mod:`subnyq.fdbf`,
    ``to_time(result) / n_sn`` samples ``(sum_m phi_m(t))**2``.
    """
    delayed = delayed_coeffs(channels, table)  # (m, k)
    k = table.k
    if k.size == 0:
        raise BandError("empty harmonic set")
    kmax = int(k.max())
    width_k = 2 * kmax + 1
    need = 2 * width_k - 1
    if n_fft is None:
        n_fft = need
    elif n_fft < need:
        raise BandError(f"temporal padding {n_fft} too small; the autoconvolution needs {need} points")
    pos = np.asarray(table.positions)
    dense = np.zeros((pos.max() + 1, width_k), dtype=complex)  # harmonic -kmax..kmax
    dense[pos[:, None], kmax + k[None, :]] = delayed
    pos_k = k > 0
    dense[pos[:, None], kmax - k[None, pos_k]] = np.conj(delayed[:, pos_k])
    ns = 2 * dense.shape[0] - 1
    f = np.fft.fft2(dense, s=(ns, n_fft))
    conv = np.fft.ifft2(f * f)[:, : 2 * width_k - 1]  # harmonic -2kmax..2kmax
    coarray = np.asarray(sum_coarray(ArrayGeometry(tuple(pos.tolist()), 1.0)).positions)
    total = n_sn * conv[coarray].sum(axis=0)
    harmonics = np.arange(-2 * kmax, 2 * kmax + 1)
    keep = harmonics >= 0
    out_k = harmonics[keep]
    values = total[keep]
    occ = np.zeros(width_k)
    occ[kmax + k] = 1.0
    occ[kmax - k] = 1.0
    nz = np.convolve(occ, occ)[keep] > 0.5
    n_line = channels.n_full
    grid = n_line * int(np.ceil((4 * kmax + 1) / n_line))
    return FourierLine(out_k[nz], values[nz], channels.T_seconds, grid)
