"""Synthetic pulse, point-scatterer phantoms and per-element RF channel data.

The transmit is a single diverging wave leaving the array origin at ``t = 0``;
the echo of scatterer ``s`` reaches element ``m`` at

    t_sm = r_s / c + sqrt((x_s - x_m)**2 + z_s**2) / c

where ``r_s`` is the scatterer's distance to the origin.  Because the transmit
does not depend on the beam direction, one frame of channel data serves every
beam angle; ``theta`` is carried as metadata only.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

logger = logging.getLogger(__name__)

PHANTOM_VERSION = 1


class AcquisitionError(ValueError):
    pass


@dataclass(frozen=True)
class Pulse:
    """Gaussian-windowed cosine ``amplitude * exp(-t^2 / (2 sigma^2)) * cos(2 pi f0 t)``."""

    center_freq_hz: float
    sigma_s: float
    fs_hz: float
    amplitude: float = 1.0
    fractional_bandwidth: float | None = None
    half_length: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "half_length", int(math.ceil(5.0 * self.sigma_s * self.fs_hz)))

    def evaluate(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return self.amplitude * np.exp(-0.5 * (t / self.sigma_s) ** 2) * np.cos(2 * np.pi * self.center_freq_hz * t)

    @property
    def lags(self) -> np.ndarray:
        return np.arange(-self.half_length, self.half_length + 1)

    @property
    def samples(self) -> np.ndarray:
        """Sampled pulse, odd length, peak at the center."""
        return self.evaluate(self.lags / self.fs_hz)

    @property
    def duration_s(self) -> float:
        return (2 * self.half_length + 1) / self.fs_hz

    def spectrum(self, n: int, indices=None) -> np.ndarray:
        """DTFT of the centered samples at harmonics ``2 pi k / n``.

        Defaults to ``k = 0 .. n // 2``.  This is the transfer function of
        circular convolution with :attr:`samples` on an ``n``-point grid.
        """
        k = np.arange(n // 2 + 1) if indices is None else np.asarray(indices)
        return np.exp(-2j * np.pi * np.outer(k, self.lags) / n) @ self.samples

    def squared(self) -> "Pulse":
        """Double-frequency lobe of ``h(t)**2``: ``A^2/2 * exp(-t^2/sigma^2) * cos(4 pi f0 t)``."""
        return Pulse(2 * self.center_freq_hz, self.sigma_s / math.sqrt(2.0), self.fs_hz, 0.5 * self.amplitude**2)

    def shifted(self, shift_hz: float) -> "Pulse":
        """Same envelope with the carrier moved down by ``shift_hz``."""
        return replace(self, center_freq_hz=self.center_freq_hz - shift_hz, fractional_bandwidth=None)


def gaussian_pulse(center_freq_hz: float = 2.72e6, fractional_bandwidth: float = 0.5,
                   fs_hz: float = 10.8e6) -> Pulse:
    """Gaussian pulse whose -6 dB spectral width is ``fractional_bandwidth * f0``."""
    if not 0 < center_freq_hz < fs_hz / 2:
        raise AcquisitionError(f"center frequency {center_freq_hz} Hz must lie in (0, fs/2 = {fs_hz / 2} Hz)")
    if not 0 < fractional_bandwidth <= 1:
        raise AcquisitionError("fractional bandwidth must be in (0, 1]")
    # |H(f)| ~ exp(-2 pi^2 sigma^2 (f - f0)^2) falls to 1/2 at half the -6 dB width
    half_width = 0.5 * fractional_bandwidth * center_freq_hz
    sigma = math.sqrt(math.log(2.0) / 2.0) / (math.pi * half_width)
    return Pulse(center_freq_hz, sigma, fs_hz, 1.0, fractional_bandwidth)


@dataclass(frozen=True)
class ImagingConfig:
    element_count: int = 64
    pitch_m: float | None = None
    fs_hz: float = 10.8e6
    c_mps: float = 1540.0
    samples_per_line: int = 1920
    center_freq_hz: float = 2.72e6
    fractional_bandwidth: float = 0.5
    angles_rad: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.element_count < 1:
            raise AcquisitionError("element_count must be >= 1")
        if not self.c_mps > 0 or not self.fs_hz > 0:
            raise AcquisitionError("sound speed and sampling rate must be positive")
        if self.pitch_m is None:
            object.__setattr__(self, "pitch_m", self.c_mps / (2.0 * self.center_freq_hz))
        if self.angles_rad is None:
            object.__setattr__(self, "angles_rad", tuple(np.deg2rad(np.linspace(-45.0, 45.0, 65)).tolist()))
        else:
            object.__setattr__(self, "angles_rad", tuple(float(a) for a in self.angles_rad))

    @property
    def depth_time_s(self) -> float:
        return self.samples_per_line / self.fs_hz

    @property
    def max_depth_m(self) -> float:
        return 0.5 * self.c_mps * self.depth_time_s

    @property
    def time_axis(self) -> np.ndarray:
        return np.arange(self.samples_per_line) / self.fs_hz

    def element_x(self, positions=None) -> np.ndarray:
        """Lateral coordinate of elements, measured from the aperture center."""
        pos = np.arange(self.element_count) if positions is None else np.asarray(positions)
        return (pos - 0.5 * (self.element_count - 1)) * self.pitch_m

    def pulse(self) -> Pulse:
        return gaussian_pulse(self.center_freq_hz, self.fractional_bandwidth, self.fs_hz)

    @property
    def carrier_harmonic(self) -> int:
        """Fourier-series index closest to the center frequency."""
        return int(round(self.center_freq_hz * self.depth_time_s))

    def to_dict(self) -> dict:
        return {
            "element_count": self.element_count,
            "pitch_m": self.pitch_m,
            "fs_hz": self.fs_hz,
            "c_mps": self.c_mps,
            "samples_per_line": self.samples_per_line,
            "center_freq_hz": self.center_freq_hz,
            "fractional_bandwidth": self.fractional_bandwidth,
            "angles_rad": list(self.angles_rad),
        }

    def key(self) -> str:
        import hashlib
        import json

        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class CystRegion:
    center_m: tuple[float, float]
    radius_m: float
    density_scale: float = 0.0
    amplitude_scale: float = 1.0

    def contains(self, x, z) -> np.ndarray:
        return (np.asarray(x) - self.center_m[0]) ** 2 + (np.asarray(z) - self.center_m[1]) ** 2 < self.radius_m**2


@dataclass
class Phantom:
    """Point reflectors ``(x_m, z_m, amplitude)`` plus optional cyst regions."""

    scatterers: np.ndarray
    cysts: list[CystRegion] = field(default_factory=list)

    def __post_init__(self):
        s = np.asarray(self.scatterers, dtype=float).reshape(-1, 3)
        if np.any(s[:, 1] <= 0):
            raise AcquisitionError("all scatterers need z > 0")
        if not np.all(np.isfinite(s)):
            raise AcquisitionError("scatterer coordinates and amplitudes must be finite")
        self.scatterers = s

    def __len__(self):
        return len(self.scatterers)

    def scaled(self, k: float) -> "Phantom":
        s = self.scatterers.copy()
        s[:, 2] *= k
        return Phantom(s, list(self.cysts))

    def __add__(self, other: "Phantom") -> "Phantom":
        return Phantom(np.vstack([self.scatterers, other.scatterers]), self.cysts + other.cysts)


def point_phantom(points: Sequence[tuple[float, float]], amplitude: float = 1.0) -> Phantom:
    return Phantom(np.array([(x, z, amplitude) for x, z in points], dtype=float))


def wire_phantom(depths_m=(0.03, 0.05, 0.07, 0.09, 0.11), lateral_m=(-0.01, 0.0, 0.01)) -> Phantom:
    """Nine-point wire target: a depth column on axis and lateral pairs at three depths."""
    pts = [(0.0, z) for z in depths_m]
    for z in (depths_m[1], depths_m[3]):
        pts += [(x, z) for x in lateral_m if x != 0.0]
    return point_phantom(pts[:9])


def speckle_phantom(rng: np.random.Generator, density_per_mm2: float, depth_range_m=(0.02, 0.12),
                    half_angle_rad: float = np.deg2rad(47.0), cysts: Sequence[CystRegion] = (),
                    points: Sequence[tuple[float, float, float]] = ()) -> Phantom:
    """Uniformly random reflectors filling an annular sector, with Gaussian amplitudes."""
    r0, r1 = depth_range_m
    area_mm2 = half_angle_rad * (r1**2 - r0**2) * 1e6
    n = int(rng.poisson(density_per_mm2 * area_mm2))
    r = np.sqrt(rng.uniform(r0**2, r1**2, n))
    ang = rng.uniform(-half_angle_rad, half_angle_rad, n)
    x, z = r * np.sin(ang), r * np.cos(ang)
    amp = rng.standard_normal(n)
    keep = np.ones(n, dtype=bool)
    for cyst in cysts:
        inside = cyst.contains(x, z)
        keep &= ~inside | (rng.uniform(size=n) < cyst.density_scale)
        amp = np.where(inside, amp * cyst.amplitude_scale, amp)
    scat = np.column_stack([x[keep], z[keep], amp[keep]])
    if len(points):
        scat = np.vstack([scat, np.asarray(points, dtype=float).reshape(-1, 3)])
    return Phantom(scat, list(cysts))


def cyst_phantom(seed: int, density_per_mm2: float = 5.0, cyst_center_m=(0.0, 0.06),
                 cyst_radius_m: float = 0.008, depth_range_m=(0.03, 0.10)) -> Phantom:
    rng = np.random.default_rng(seed)
    cyst = CystRegion(tuple(cyst_center_m), cyst_radius_m, 0.0, 1.0)
    return speckle_phantom(rng, density_per_mm2, depth_range_m, cysts=[cyst])


@dataclass
class ChannelFrame:
    theta_rad: float
    traces: np.ndarray
    config: ImagingConfig

    def __post_init__(self):
        shape = (self.config.element_count, self.config.samples_per_line)
        if self.traces.shape != shape:
            raise AcquisitionError(f"traces have shape {self.traces.shape}, expected {shape}")

    def __add__(self, other: "ChannelFrame") -> "ChannelFrame":
        return ChannelFrame(self.theta_rad, self.traces + other.traces, self.config)

    def with_theta(self, theta: float) -> "ChannelFrame":
        return ChannelFrame(float(theta), self.traces, self.config)


def arrival_times(phantom: Phantom, config: ImagingConfig) -> np.ndarray:
    """Round-trip arrival times, shape (elements, scatterers)."""
    x, z = phantom.scatterers[:, 0], phantom.scatterers[:, 1]
    xm = config.element_x()[:, None]
    return (np.hypot(x, z) + np.hypot(x - xm, z)) / config.c_mps


def simulate_channels(phantom: Phantom, config: ImagingConfig, pulse: Pulse | None = None,
                      theta: float = 0.0) -> ChannelFrame:
    """Per-element RF traces at ``fs`` with the pulse evaluated at exact arrival offsets."""
    pulse = config.pulse() if pulse is None else pulse
    n = config.samples_per_line
    fs = config.fs_hz
    scat = phantom.scatterers
    inside = np.hypot(scat[:, 0], scat[:, 1]) <= config.max_depth_m
    if not np.all(inside):
        logger.warning("%d scatterers beyond the recorded depth were excluded", int(np.sum(~inside)))
        scat = scat[inside]
    traces = np.zeros((config.element_count, n))
    if len(scat) == 0:
        return ChannelFrame(float(theta), traces, config)
    L = pulse.half_length
    lags = np.arange(-L, L + 1)
    # chunk scatterers so the (chunk, taps) work array stays small
    chunk = max(1, 2_000_000 // (2 * L + 1))
    x, z, amp = scat[:, 0], scat[:, 1], scat[:, 2]
    r_tx = np.hypot(x, z)
    xm = config.element_x()
    padded = np.zeros(n + 2 * L + 2)
    for m in range(config.element_count):
        padded[:] = 0.0
        for start in range(0, len(scat), chunk):
            sl = slice(start, start + chunk)
            t_arr = (r_tx[sl] + np.hypot(x[sl] - xm[m], z[sl])) / config.c_mps
            center = np.rint(t_arr * fs).astype(np.int64)
            idx = center[:, None] + lags[None, :]
            vals = amp[sl, None] * pulse.evaluate(idx / fs - t_arr[:, None])
            padded += np.bincount((idx + L).ravel(), weights=vals.ravel(), minlength=padded.size)[: padded.size]
        traces[m] = padded[L:L + n]
    return ChannelFrame(float(theta), traces, config)


def add_noise(frame: ChannelFrame, snr_db: float, seed: int) -> ChannelFrame:
    """White Gaussian noise scaled so the frame's empirical SNR equals ``snr_db``.

    ``snr_db = inf`` returns the frame unchanged.
    """
    if np.isposinf(snr_db):
        return frame
    if not np.isfinite(snr_db):
        raise AcquisitionError("snr_db must be finite or +inf")
    power = float(np.mean(frame.traces**2))
    noise = np.random.default_rng(seed).standard_normal(frame.traces.shape)
    if power > 0:
        noise *= math.sqrt(power / 10 ** (snr_db / 10) / np.mean(noise**2))
    else:
        noise[:] = 0.0
    return ChannelFrame(frame.theta_rad, frame.traces + noise, frame.config)


# --- phantom files ---------------------------------------------------------

def phantom_to_dict(phantom: Phantom) -> dict:
    return {
        "version": PHANTOM_VERSION,
        "scatterers": phantom.scatterers.tolist(),
        "cysts": [
            {"center": list(c.center_m), "radius": c.radius_m, "density_scale": c.density_scale,
             "amplitude_scale": c.amplitude_scale}
            for c in phantom.cysts
        ],
    }


def save_phantom(phantom: Phantom, path) -> None:
    Path(path).write_text(yaml.safe_dump(phantom_to_dict(phantom), sort_keys=False))


def load_phantom(path) -> Phantom:
    """Read a phantom file (YAML or JSON; see README for the schema).

    An optional ``speckle`` block adds random background reflectors:
    ``{density_per_mm2, depth_range, seed}``; cysts then carve or rescale it.
    """
    doc = yaml.safe_load(Path(path).read_text())
    if not isinstance(doc, dict):
        raise AcquisitionError(f"{path}: phantom file must be a mapping")
    version = doc.get("version", PHANTOM_VERSION)
    if version != PHANTOM_VERSION:
        raise AcquisitionError(f"{path}: unsupported phantom version {version}")
    cysts = [
        CystRegion(tuple(c["center"]), float(c["radius"]), float(c.get("density_scale", 0.0)),
                   float(c.get("amplitude_scale", 1.0)))
        for c in doc.get("cysts", []) or []
    ]
    points = [tuple(map(float, p)) for p in doc.get("scatterers", []) or []]
    if any(len(p) != 3 for p in points):
        raise AcquisitionError(f"{path}: each scatterer needs [x_m, z_m, amplitude]")
    speckle = doc.get("speckle")
    if speckle:
        rng = np.random.default_rng(int(speckle.get("seed", 0)))
        return speckle_phantom(rng, float(speckle["density_per_mm2"]),
                               tuple(speckle.get("depth_range", (0.02, 0.12))), cysts=cysts, points=points)
    return Phantom(np.asarray(points, dtype=float).reshape(-1, 3), cysts)
