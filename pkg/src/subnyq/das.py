"""Time-domain delay-and-sum beamforming with dynamic receive focusing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import hilbert

from .acquisition import ChannelFrame, ImagingConfig

INTERP_TAPS = 8


@dataclass
class BeamLine:
    theta_rad: float
    samples: np.ndarray
    fs_hz: float

    def __len__(self):
        return len(self.samples)

    def __add__(self, other: "BeamLine") -> "BeamLine":
        return BeamLine(self.theta_rad, self.samples + other.samples, self.fs_hz)


def delay_tau(t, theta: float, delta_m, c: float):
    """Receive time on element ``delta_m`` of the echo that element 0 sees at ``t``.

    ``tau = (t + sqrt(t^2 - 4 (d/c) t sin(theta) + 4 (d/c)^2)) / 2``
    """
    t = np.asarray(t, dtype=float)
    d = np.asarray(delta_m, dtype=float) / c
    disc = t**2 - 4.0 * d * t * np.sin(theta) + 4.0 * d**2
    return 0.5 * (t + np.sqrt(np.maximum(disc, 0.0)))


def _sinc_kernel(frac: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Offsets and Hann-windowed sinc weights for fractional positions."""
    half = INTERP_TAPS // 2
    offs = np.arange(-half + 1, half + 1)
    d = frac[..., None] - offs
    w = np.sinc(d) * 0.5 * (1.0 + np.cos(np.pi * d / half))
    return offs, w


def interpolate(traces: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Evaluate each row of ``traces`` at fractional sample ``positions`` (same leading shape).

    Taps falling outside the recorded trace contribute zero.
    """
    n = traces.shape[-1]
    base = np.floor(positions)
    offs, w = _sinc_kernel(positions - base)
    idx = base.astype(np.int64)[..., None] + offs
    valid = (idx >= 0) & (idx < n)
    rows = np.arange(traces.shape[0])[:, None, None]
    vals = traces[rows, np.clip(idx, 0, n - 1)]
    return np.sum(np.where(valid, vals * w, 0.0), axis=-1)


def delayed_channels(frame: ChannelFrame, theta: float | None = None, positions=None) -> np.ndarray:
    """Dynamically focused channels along ``theta``, shape (elements, N)."""
    cfg = frame.config
    theta = frame.theta_rad if theta is None else theta
    pos = np.arange(cfg.element_count) if positions is None else np.asarray(positions)
    t = cfg.time_axis
    tau = delay_tau(t[None, :], theta, cfg.element_x(pos)[:, None], cfg.c_mps)
    return interpolate(frame.traces[pos], tau * cfg.fs_hz)


def das_line(frame: ChannelFrame, theta: float | None = None, positions=None) -> BeamLine:
    theta = frame.theta_rad if theta is None else theta
    delayed = delayed_channels(frame, theta, positions)
    return BeamLine(float(theta), delayed.mean(axis=0), frame.config.fs_hz)


def das_image(frame: ChannelFrame, angles=None, positions=None) -> np.ndarray:
    """Beamform every angle; returns (angles, N)."""
    angles = frame.config.angles_rad if angles is None else angles
    return np.stack([das_line(frame, th, positions).samples for th in angles])


def envelope(x: np.ndarray) -> np.ndarray:
    return np.abs(hilbert(np.asarray(x, dtype=float), axis=-1))


def envelope_log(line, dynamic_range_db: float = 60.0, reference: float | None = None) -> np.ndarray:
    """Envelope, normalized to its maximum (or ``reference``), log-compressed into [0, 1].

    Accepts a BeamLine, a 1-D line or a (lines, N) stack.
    """
    if dynamic_range_db <= 0:
        raise ValueError("dynamic range must be positive")
    x = line.samples if isinstance(line, BeamLine) else np.asarray(line, dtype=float)
    env = envelope(x)
    peak = float(env.max()) if reference is None else float(reference)
    if peak <= 0:
        return np.zeros_like(env)
    with np.errstate(divide="ignore"):
        db = 20.0 * np.log10(env / peak)
    return np.clip(1.0 + db / dynamic_range_db, 0.0, 1.0)


def axial_spacing(config: ImagingConfig) -> float:
    return config.c_mps / (2.0 * config.fs_hz)
