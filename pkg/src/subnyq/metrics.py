"""Image-quality metrics: FWHM resolution and contrast-to-noise ratio on B-mode images."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .das import envelope, envelope_log

CSV_FIELDS = ("method", "budget", "elements", "axial_fwhm_mm", "lateral_fwhm_mm", "cnr_db")


class MetricError(ValueError):
    pass


@dataclass
class BModeImage:
    """Log-compressed envelope lines on the (angle, sample) grid, values in [0, 1]."""

    values: np.ndarray  # (angles, N)
    angles_rad: np.ndarray
    fs_hz: float
    c_mps: float
    dynamic_range_db: float = 60.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.angles_rad = np.asarray(self.angles_rad, dtype=float)
        if self.values.ndim != 2 or self.values.shape[0] != self.angles_rad.size:
            raise MetricError("one line per angle is required")
        if np.any(self.values < 0) or np.any(self.values > 1):
            raise MetricError("B-mode values must lie in [0, 1]")

    @property
    def depths_m(self) -> np.ndarray:
        return np.arange(self.values.shape[1]) * self.c_mps / (2.0 * self.fs_hz)

    def grid_xz(self) -> tuple[np.ndarray, np.ndarray]:
        r = self.depths_m[None, :]
        th = self.angles_rad[:, None]
        return r * np.sin(th), r * np.cos(th)


def bmode(lines, angles_rad, fs_hz: float, c_mps: float, dynamic_range_db: float = 60.0,
          squared: bool = False) -> BModeImage:
    """Envelope-detect and log-compress a (angles, N) stack against its global maximum.

    ``squared`` marks lines whose envelope scales with the square of the echo amplitude
    (products of channel pairs); their envelope is square-rooted before compression.
    """
    lines = np.asarray(lines, dtype=float)
    if squared:
        env = np.sqrt(envelope(lines))
        peak = float(env.max())
        if peak <= 0:
            return BModeImage(np.zeros_like(env), angles_rad, fs_hz, c_mps, dynamic_range_db)
        with np.errstate(divide="ignore"):
            vals = np.clip(1.0 + 20.0 * np.log10(env / peak) / dynamic_range_db, 0.0, 1.0)
    else:
        env = envelope(lines)
        vals = envelope_log(lines, dynamic_range_db, reference=float(env.max()) if env.size else None)
    return BModeImage(vals, angles_rad, fs_hz, c_mps, dynamic_range_db)


def fwhm(cut, sample_spacing: float = 1.0) -> float:
    """Width between the half-maximum crossings around the global peak, linearly interpolated."""
    y = np.asarray(cut, dtype=float)
    if y.ndim != 1 or y.size < 3:
        raise MetricError("cut must be a 1-D vector of at least 3 samples")
    i = int(np.argmax(y))
    peak = y[i]
    if not peak > 0:
        raise MetricError("cut has no positive peak")
    half = 0.5 * peak
    left = i
    while left > 0 and y[left - 1] > half:
        left -= 1
    right = i
    while right < y.size - 1 and y[right + 1] > half:
        right += 1
    if left == 0 or right == y.size - 1:
        raise MetricError("no half-maximum crossing on one side of the peak")
    # crossing between left-1 (<= half) and left (> half)
    xl = (left - 1) + (half - y[left - 1]) / (y[left] - y[left - 1])
    xr = right + (y[right] - half) / (y[right] - y[right + 1])
    return float((xr - xl) * sample_spacing)


def point_resolution(lines, angles_rad, fs_hz: float, c_mps: float, squared: bool = False) -> tuple[float, float]:
    """Axial and lateral FWHM (metres) of the brightest target in a line stack."""
    env = envelope(np.asarray(lines, dtype=float))
    if squared:
        env = np.sqrt(env)
    a, s = np.unravel_index(int(np.argmax(env)), env.shape)
    axial = fwhm(env[a], c_mps / (2.0 * fs_hz))
    depth = s * c_mps / (2.0 * fs_hz)
    sin_t = np.sin(np.asarray(angles_rad, dtype=float))
    lo, hi = max(a - 1, 0), min(a + 1, sin_t.size - 1)
    spacing = depth * abs(sin_t[hi] - sin_t[lo]) / max(hi - lo, 1)
    lateral = fwhm(env[:, s], spacing)
    return axial, lateral


def disk_mask(image: BModeImage, center_m, radius_m: float) -> np.ndarray:
    x, z = image.grid_xz()
    return (x - center_m[0]) ** 2 + (z - center_m[1]) ** 2 <= radius_m**2


def cyst_masks(image: BModeImage, cyst_center_m, cyst_radius_m: float, shrink: float = 0.75,
               background_offset: float = 2.5) -> tuple[np.ndarray, np.ndarray]:
    """Inner cyst disk and an equal disk of background ``background_offset`` radii deeper."""
    r = shrink * cyst_radius_m
    cyst = disk_mask(image, cyst_center_m, r)
    bg_center = (cyst_center_m[0], cyst_center_m[1] + background_offset * cyst_radius_m)
    return cyst, disk_mask(image, bg_center, r)


def cnr_values(cyst_values, background_values) -> float:
    c = np.asarray(cyst_values, dtype=float).ravel()
    b = np.asarray(background_values, dtype=float).ravel()
    if c.size == 0 or b.size == 0:
        raise MetricError("both regions must be non-empty")
    diff = abs(c.mean() - b.mean())
    spread = math.sqrt(c.var() + b.var())
    if spread == 0:
        if diff == 0:
            raise MetricError("contrast undefined: identical constant regions")
        return math.inf
    if diff == 0:
        return -math.inf
    return 20.0 * math.log10(diff / spread)


def cnr(image: BModeImage, cyst_mask, background_mask) -> float:
    """``20 log10(|mu_c - mu_b| / sqrt(var_c + var_b))`` over log-compressed values."""
    cm = np.asarray(cyst_mask, dtype=bool)
    bm = np.asarray(background_mask, dtype=bool)
    if cm.shape != image.values.shape or bm.shape != image.values.shape:
        raise MetricError("masks must match the image grid")
    if np.any(cm & bm):
        raise MetricError("cyst and background masks overlap")
    return cnr_values(image.values[cm], image.values[bm])


def write_rows(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{row[k]:.6g}" if isinstance(row[k], float) else row[k]) for k in CSV_FIELDS})
