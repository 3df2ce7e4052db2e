"""Sparse recovery of beamformed lines from a subset of Fourier coefficients.

A line is modelled as pulse replicas on the sampling grid, ``phi = G a``.  Its
coefficients on the harmonic set ``mu`` are ``c = H D a`` with ``D`` the rows
``mu`` of the DFT matrix and ``H`` the pulse response at those harmonics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .acquisition import Pulse
from .das import BeamLine
from .fdbf import BandError, FourierLine, full_spectrum


@dataclass(frozen=True)
class FriOperator:
    """``a -> response * DFT(a)[indices]`` for real codes of length ``n``."""

    response: np.ndarray
    indices: np.ndarray
    n: int

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() > self.n // 2):
            raise BandError(f"harmonics must lie in [0, {self.n // 2}]")
        if not np.all(np.isfinite(self.response)):
            raise ValueError("pulse response must be finite")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "response", np.asarray(self.response, dtype=complex))

    @property
    def shape(self) -> tuple[int, int]:
        return self.indices.size, self.n

    def forward(self, a) -> np.ndarray:
        a = np.asarray(a, dtype=float)
        return self.response * np.fft.rfft(a, axis=-1)[..., self.indices]

    def adjoint(self, y) -> np.ndarray:
        """Adjoint for the real inner product ``Re <u, v>`` on both sides."""
        y = np.asarray(y, dtype=complex)
        spec = np.zeros(y.shape[:-1] + (self.n,), dtype=complex)
        spec[..., self.indices] = np.conj(self.response) * y
        return np.real(np.fft.ifft(spec, axis=-1)) * self.n

    def matrix(self) -> np.ndarray:
        s = np.arange(self.n)
        return self.response[:, None] * np.exp(-2j * np.pi * np.outer(self.indices, s) / self.n)


def build_operator(pulse: Pulse, mu, n: int) -> FriOperator:
    """Operator whose forward map gives Fourier-series coefficients of ``conv(code, pulse)``."""
    mu = np.asarray(mu, dtype=np.int64)
    return FriOperator(pulse.spectrum(n, mu) / n, mu, n)


@dataclass
class SparseCode:
    values: np.ndarray
    fs_hz: float
    objective: list[float] = field(default_factory=list)


def preprocess_to_time(line: FourierLine, n_target: int) -> np.ndarray:
    """Restore the negative side, zero-pad to ``n_target`` and return real samples."""
    kmax = int(line.indices.max()) if line.indices.size else 0
    nyquist = n_target % 2 == 0 and kmax == n_target // 2  # the real Nyquist bin fits on an even grid
    if n_target < 2 * kmax + 1 and not nyquist:
        raise BandError(f"n_target={n_target} cannot hold harmonic {kmax}")
    return np.real(np.fft.ifft(full_spectrum(line, n_target), axis=-1)) * n_target


def soft_threshold(x, lam: float) -> np.ndarray:
    if lam < 0:
        raise ValueError("threshold must be non-negative")
    x = np.asarray(x, dtype=float)
    return np.sign(x) * np.maximum(np.abs(x) - lam, 0.0)


class _Dense:
    def __init__(self, A):
        self.A = np.asarray(A)
        self.n = self.A.shape[1]

    def forward(self, a):
        return a @ self.A.T

    def adjoint(self, y):
        return np.real(y @ np.conj(self.A))


def _as_op(op):
    return op if hasattr(op, "adjoint") else _Dense(op)


def spectral_norm_sq(op, iters: int = 50, seed: int = 0) -> float:
    """Largest squared singular value of ``op`` (real domain) by power iteration."""
    op = _as_op(op)
    v = np.random.default_rng(seed).standard_normal(op.n)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = op.adjoint(op.forward(v))
        lam = float(np.linalg.norm(w))
        if lam == 0:
            return 0.0
        v = w / lam
    return lam


def default_lambda(op, y, scale: float = 0.05) -> float:
    return scale * float(np.max(np.abs(_as_op(op).adjoint(y))))


def objective(op, y, x, lam: float) -> float:
    r = _as_op(op).forward(x) - y
    return 0.5 * float(np.sum(np.abs(r) ** 2)) + lam * float(np.sum(np.abs(x)))


def ista_solve(y, op, lam: float | None = None, step: float | None = None, iters: int = 100,
               fs_hz: float = 1.0, track_objective: bool = True) -> SparseCode:
    """Iterative shrinkage-thresholding for ``min 0.5 ||y - A x||^2 + lam ||x||_1`` over real ``x``.

    ``x <- S_{step*lam}(x + step * Re(A^H (y - A x)))`` from ``x = 0``.  ``op`` is a
    :class:`FriOperator` (FFT-based) or an explicit matrix; for a matrix the update is
    evaluated with the precomputed ``W_e = step A^H`` and ``W_t = I - step Re(A^H A)``.
    """
    y = np.asarray(y)
    if step is None:
        step = 0.99 / spectral_norm_sq(op)
    if not step > 0:
        raise ValueError("step size must be positive")
    lam = default_lambda(op, y) if lam is None else float(lam)
    thr = step * lam
    history = []
    if isinstance(op, FriOperator) or hasattr(op, "adjoint"):
        x = np.zeros(op.n)
        for _ in range(iters):
            x = soft_threshold(x + step * op.adjoint(y - op.forward(x)), thr)
            if track_objective:
                history.append(objective(op, y, x, lam))
    else:
        A = np.asarray(op)
        We = step * np.conj(A).T
        Wt = np.eye(A.shape[1]) - step * np.real(np.conj(A).T @ A)
        b = np.real(We @ y)
        x = np.zeros(A.shape[1])
        for _ in range(iters):
            x = soft_threshold(b + Wt @ x, thr)
            if track_objective:
                history.append(objective(A, y, x, lam))
    return SparseCode(x, fs_hz, history)


def ista_batch(Y, op: FriOperator, lam_scale: float = 0.05, step: float | None = None,
               iters: int = 100) -> np.ndarray:
    """ISTA on every row of ``Y`` at once, each with ``lam = lam_scale * max|A^H y|``."""
    Y = np.atleast_2d(np.asarray(Y, dtype=complex))
    if step is None:
        step = 0.99 / spectral_norm_sq(op)
    if not step > 0:
        raise ValueError("step size must be positive")
    thr = step * lam_scale * np.max(np.abs(op.adjoint(Y)), axis=-1, keepdims=True)
    X = np.zeros((Y.shape[0], op.n))
    for _ in range(iters):
        V = X + step * op.adjoint(Y - op.forward(X))
        X = np.sign(V) * np.maximum(np.abs(V) - thr, 0.0)
    return X


def dense_ista(y_time, W_t: np.ndarray, W_e: np.ndarray, thr: float, iters: int) -> np.ndarray:
    """Plain matrix-form ISTA ``x <- S(W_e y + W_t x)`` with precomputed matrices.

    ``y_time`` may hold one line per column, in which case the columns are solved together.
    """
    b = np.real(W_e @ y_time)
    x = np.zeros(b.shape)
    for _ in range(iters):
        x = soft_threshold(b + W_t @ x, thr)
    return x


def reconstruct_line(code, pulse: Pulse, theta: float = 0.0) -> BeamLine:
    """Linear convolution of the code with the centered pulse, truncated to the code length."""
    values = code.values if isinstance(code, SparseCode) else np.asarray(code, dtype=float)
    out = np.convolve(values, pulse.samples, mode="same")
    if out.size != values.size:  # pulse longer than the code
        start = (out.size - values.size) // 2
        out = out[start:start + values.size]
    return BeamLine(theta, out, pulse.fs_hz)
