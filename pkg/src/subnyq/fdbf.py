"""Frequency-domain beamforming.

Fourier-series coefficients use the convention ``c[k] = (1/N) sum_t x[t] exp(-2j pi k t / N)``
so a real line is ``x[t] = sum_k c[k] exp(2j pi k t / N)`` over all integer ``k``.
Only non-negative harmonics are stored; negative ones follow by conjugate symmetry.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .acquisition import ImagingConfig, Pulse
from .das import delay_tau

logger = logging.getLogger(__name__)

TABLE_MAGIC = b"SNQDTAB1"
_K_CHUNK = 32
# Distortion bandwidth: the energy of each table row drifts towards negative offsets
# in the near field, so the lower side is kept wider.
DEFAULT_N1 = 30
DEFAULT_N2 = 5


class BandError(ValueError):
    """Harmonic indices outside the representable band or mismatched between inputs."""


@dataclass
class FourierLine:
    """Harmonic indices and coefficients of one line (or of several channels, rows of ``values``)."""

    indices: np.ndarray
    values: np.ndarray
    T_seconds: float
    n_full: int

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=complex)
        if self.values.shape[-1] != self.indices.size:
            raise BandError("one value per harmonic index is required")
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() > self.n_full // 2):
            raise BandError(f"harmonics must lie in [0, {self.n_full // 2}]")
        if np.any(np.diff(self.indices) <= 0):
            raise BandError("harmonic indices must be strictly increasing")

    def restrict(self, indices) -> "FourierLine":
        indices = np.asarray(indices, dtype=np.int64)
        pos = np.searchsorted(self.indices, indices)
        if np.any(pos >= self.indices.size) or np.any(self.indices[np.minimum(pos, self.indices.size - 1)] != indices):
            raise BandError("requested harmonics are not all present")
        return FourierLine(indices, self.values[..., pos], self.T_seconds, self.n_full)

    def __mul__(self, k):
        return FourierLine(self.indices, self.values * k, self.T_seconds, self.n_full)

    __rmul__ = __mul__

    def __add__(self, other: "FourierLine") -> "FourierLine":
        if not np.array_equal(self.indices, other.indices):
            raise BandError("cannot add lines on different harmonic sets")
        return FourierLine(self.indices, self.values + other.values, self.T_seconds, self.n_full)


def fourier_coeffs(trace, mu, T: float) -> FourierLine:
    """Fourier-series coefficients of real trace(s) at harmonics ``mu`` (last axis is time)."""
    trace = np.asarray(trace, dtype=float)
    n = trace.shape[-1]
    mu = np.asarray(mu, dtype=np.int64)
    if mu.size and (mu.min() < 0 or mu.max() > n // 2):
        raise BandError(f"harmonic index beyond the Nyquist band [0, {n // 2}]")
    spec = np.fft.rfft(trace, axis=-1) / n
    return FourierLine(mu, spec[..., mu], T, n)


def full_spectrum(line: FourierLine, n: int | None = None) -> np.ndarray:
    """Dense ``n``-point DFT layout (coefficient convention) with the negative side mirrored."""
    n = line.n_full if n is None else n
    if line.indices.size and 2 * line.indices.max() + 1 > n and not (n % 2 == 0 and line.indices.max() == n // 2):
        raise BandError(f"grid of {n} points cannot hold harmonic {line.indices.max()}")
    out = np.zeros(line.values.shape[:-1] + (n,), dtype=complex)
    out[..., line.indices] = line.values
    neg = line.indices[(line.indices > 0) & (2 * line.indices != n)]
    sel = np.isin(line.indices, neg)
    out[..., (-neg) % n] = np.conj(line.values[..., sel])
    return out


def to_time(line: FourierLine, n: int | None = None) -> np.ndarray:
    """Real samples ``sum_k c[k] exp(2j pi k t / n)`` on an ``n``-point grid."""
    n = line.n_full if n is None else n
    return np.real(np.fft.ifft(full_spectrum(line, n), axis=-1) * n)


# --- distortion tables -----------------------------------------------------

def beam_support_time(config: ImagingConfig, theta: float, positions=None) -> float:
    """Latest ``t`` for which every element's delayed time stays within the recorded depth."""
    T = config.depth_time_s
    d = config.element_x(positions) / config.c_mps
    with np.errstate(divide="ignore", invalid="ignore"):
        tb = (T**2 - d**2) / (T - d * np.sin(theta))
    tb = np.where(np.isfinite(tb) & (tb > 0), tb, T)
    return float(min(T, tb.min()))


@dataclass
class DistortionTable:
    theta_rad: float
    k: np.ndarray
    n1: int
    n2: int
    positions: np.ndarray
    Q: np.ndarray  # (k, element, n) with n running from -n1 to n2
    T_B_seconds: float
    T_seconds: float
    n_full: int

    @property
    def n_offsets(self) -> np.ndarray:
        return np.arange(-self.n1, self.n2 + 1)


def distortion_table(config: ImagingConfig, theta: float, k_range, n1: int = DEFAULT_N1, n2: int = DEFAULT_N2,
                     positions=None, support: float | None = None) -> DistortionTable:
    """Fourier coefficients of the geometric distortion for each harmonic and element.

    ``Q[k, m, n] = (1/N) sum_t I(t < T_B) exp(2j pi ((k - n) tau_m(t) - k t) / N)`` with times
    in samples, i.e. the rectangle rule on the ``fs`` grid (exact trapezoid for periodic data).
    """
    if n1 < 0 or n2 < 0:
        raise ValueError("n1 and n2 must be non-negative")
    k = np.asarray(k_range, dtype=np.int64)
    pos = np.arange(config.element_count) if positions is None else np.asarray(positions)
    n = config.samples_per_line
    fs = config.fs_hz
    tb = beam_support_time(config, theta, pos) if support is None else float(support)
    t = config.time_axis
    ind = (t < tb).astype(float)
    tau = delay_tau(t[None, :], theta, config.element_x(pos)[:, None], config.c_mps) * fs  # samples
    shift = tau - np.arange(n)[None, :]
    offsets = np.arange(-n1, n2 + 1)
    # B[m, t, n] = exp(-2j pi n tau / N)
    B = np.exp(-2j * np.pi * tau[:, :, None] * offsets[None, None, :] / n)
    step = np.exp(2j * np.pi * shift / n)
    Q = np.empty((k.size, pos.size, offsets.size), dtype=complex)
    if k.size == 0:
        return DistortionTable(float(theta), k, n1, n2, pos, Q, tb, config.depth_time_s, n)
    span = np.arange(k.min(), k.max() + 1)
    where = np.full(span.size, -1)
    where[k - k.min()] = np.arange(k.size)
    for start in range(0, span.size, _K_CHUNK):
        ks = span[start:start + _K_CHUNK]
        rows = where[start:start + ks.size]
        if np.all(rows < 0):
            continue
        A = np.empty((pos.size, ks.size, n), dtype=complex)
        A[:, 0] = ind * np.exp(2j * np.pi * ks[0] * shift / n)
        for i in range(1, ks.size):
            np.multiply(A[:, i - 1], step, out=A[:, i])
        chunk = np.matmul(A, B) / n  # (m, k, n)
        sel = rows >= 0
        Q[rows[sel]] = np.transpose(chunk[:, sel], (1, 0, 2))
    return DistortionTable(float(theta), k, n1, n2, pos, Q, tb, config.depth_time_s, n)


def mirror_table(table: DistortionTable, theta: float, positions_mirror) -> DistortionTable:
    """Table for ``-theta`` from that for ``theta`` when the array is symmetric about the center."""
    return DistortionTable(float(theta), table.k, table.n1, table.n2, np.asarray(positions_mirror),
                           table.Q[:, ::-1], table.T_B_seconds, table.T_seconds, table.n_full)


def _gather(channel: FourierLine, k: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """``c_m[k - n]`` for every (m, k, n); absent harmonics read as zero."""
    n = channel.n_full
    dense = full_spectrum(channel, n)
    idx = (k[:, None] - offsets[None, :])
    if np.any(np.abs(idx) > n // 2):
        raise BandError("padded band exceeds the Nyquist range")
    return dense[..., idx % n]


def delayed_coeffs(channels: FourierLine, table: DistortionTable) -> np.ndarray:
    """Per-element delayed coefficients ``sum_n c_m[k - n] Q[k, m, n]``, shape (elements, k)."""
    if channels.values.ndim != 2 or channels.values.shape[0] != table.positions.size:
        raise BandError(
            f"channel coefficients for {channels.values.shape[:-1]} elements do not match a table of "
            f"{table.positions.size} elements"
        )
    if channels.n_full != table.n_full:
        raise BandError("channel coefficients and table were built for different line lengths")
    g = _gather(channels, table.k, table.n_offsets)  # (m, k, n)
    return np.einsum("mkn,kmn->mk", g, table.Q)


def fdbf_line(channels: FourierLine, table: DistortionTable) -> FourierLine:
    """Beamformed coefficients ``c[k] = (1/M) sum_m sum_n c_m[k - n] Q[k, m, n]``."""
    delayed = delayed_coeffs(channels, table)
    return FourierLine(table.k, delayed.mean(axis=0), channels.T_seconds, channels.n_full)


# --- sub-sampling ----------------------------------------------------------

def in_band(pulse: Pulse, n: int, floor_db: float = -40.0) -> np.ndarray:
    mag = np.abs(pulse.spectrum(n))
    return np.flatnonzero(mag >= mag.max() * 10 ** (floor_db / 20))


def select_subsample(pulse: Pulse, budget: int, n: int, strategy: str = "central-band",
                     seed: int = 0) -> np.ndarray:
    """Harmonic indices to keep: a contiguous top-energy window or a random in-band subset."""
    band = in_band(pulse, n)
    if budget < 1 or budget > band.size:
        raise BandError(f"budget {budget} outside the {band.size} in-band harmonics")
    if strategy == "central-band":
        mag = np.abs(pulse.spectrum(n))
        window = np.convolve(mag, np.ones(budget), mode="valid")
        start = int(np.argmax(window))
        return np.arange(start, start + budget)
    if strategy == "random-in-band":
        rng = np.random.default_rng(seed)
        return np.sort(rng.choice(band, size=budget, replace=False))
    raise ValueError(f"unknown strategy {strategy!r}")


def reduction_factor(n: int, budget: int, elements_full: int = 1, elements_used: int = 1) -> float:
    return n * elements_full / (budget * elements_used)


# --- disk cache ------------------------------------------------------------

def table_key(config: ImagingConfig, theta: float, k, n1: int, n2: int, positions) -> str:
    h = hashlib.sha256()
    h.update(config.key().encode())
    h.update(np.float64(theta).tobytes())
    h.update(np.asarray(k, dtype=np.int64).tobytes())
    h.update(np.asarray(positions, dtype=np.int64).tobytes())
    h.update(f"{n1},{n2}".encode())
    return h.hexdigest()[:24]


def save_table(table: DistortionTable, path, key: str = "") -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(TABLE_MAGIC)
        fh.write(table.Q.astype("<c16").tobytes())
    meta = {
        "version": 1, "key": key, "theta_rad": table.theta_rad, "k": table.k.tolist(), "n1": table.n1,
        "n2": table.n2, "positions": table.positions.tolist(), "T_B_seconds": table.T_B_seconds,
        "T_seconds": table.T_seconds, "n_full": table.n_full, "shape": list(table.Q.shape),
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta))


def load_table(path) -> tuple[DistortionTable, str]:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    raw = path.read_bytes()
    if raw[:8] != TABLE_MAGIC:
        raise ValueError(f"{path}: not a distortion table")
    shape = tuple(meta["shape"])
    body = raw[8:]
    if len(body) != int(np.prod(shape)) * 16:
        raise ValueError(f"{path}: truncated distortion table")
    Q = np.frombuffer(body, dtype="<c16").reshape(shape).copy()
    table = DistortionTable(meta["theta_rad"], np.asarray(meta["k"]), meta["n1"], meta["n2"],
                            np.asarray(meta["positions"]), Q, meta["T_B_seconds"], meta["T_seconds"],
                            meta["n_full"])
    return table, meta.get("key", "")


def cached_table(config: ImagingConfig, theta: float, k, n1: int = DEFAULT_N1, n2: int = DEFAULT_N2, positions=None,
                 cache_dir=None) -> DistortionTable:
    """Compute a table once per geometry and keep it on disk when ``cache_dir`` is set."""
    pos = np.arange(config.element_count) if positions is None else np.asarray(positions)
    if cache_dir is None:
        return distortion_table(config, theta, k, n1, n2, pos)
    key = table_key(config, theta, k, n1, n2, pos)
    path = Path(cache_dir) / f"qtable-{key}.bin"
    if path.exists():
        try:
            table, stored = load_table(path)
            if stored == key:
                return table
        except (ValueError, OSError, KeyError) as exc:
            logger.warning("ignoring unreadable cache entry %s: %s", path, exc)
    table = distortion_table(config, theta, k, n1, n2, pos)
    Path(cache_dir).mkdir(parents=True, exist_ok=True)
    save_table(table, path, key)
    return table
