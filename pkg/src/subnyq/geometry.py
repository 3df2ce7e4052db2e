"""Array geometries, fractal sparse arrays, sum co-arrays and beampatterns."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np


class GeometryError(ValueError):
    """Raised for invalid array or fractal specifications."""


@dataclass(frozen=True)
class ArrayGeometry:
    """Element indices on a uniform grid of spacing ``pitch_m``."""

    positions: tuple[int, ...]
    pitch_m: float

    def __post_init__(self):
        pos = tuple(int(p) for p in self.positions)
        if not pos:
            raise GeometryError("array must contain at least one element")
        if any(b <= a for a, b in zip(pos, pos[1:])):
            raise GeometryError("positions must be strictly increasing")
        if pos[0] < 0:
            raise GeometryError("positions must be non-negative")
        if not self.pitch_m > 0:
            raise GeometryError("pitch must be positive")
        object.__setattr__(self, "positions", pos)

    @classmethod
    def ula(cls, n_elements: int, pitch_m: float) -> "ArrayGeometry":
        return cls(tuple(range(n_elements)), pitch_m)

    @property
    def size(self) -> int:
        return len(self.positions)

    def __len__(self) -> int:
        return len(self.positions)

    def indicator(self) -> np.ndarray:
        """Binary occupancy vector of length ``max(positions) + 1``."""
        ind = np.zeros(self.positions[-1] + 1)
        ind[list(self.positions)] = 1.0
        return ind

    def issubset(self, other: "ArrayGeometry") -> bool:
        return set(self.positions) <= set(other.positions)


@dataclass(frozen=True)
class FractalSpec:
    generator: tuple[int, ...]
    order: int

    def __post_init__(self):
        gen = tuple(sorted(set(int(g) for g in self.generator)))
        if not gen:
            raise GeometryError("fractal generator is empty")
        if 0 not in gen or gen[0] < 0:
            raise GeometryError("fractal generator must contain 0 and be non-negative")
        if self.order < 0:
            raise GeometryError("fractal order must be non-negative")
        object.__setattr__(self, "generator", gen)

    @classmethod
    def parse(cls, text: str) -> "FractalSpec":
        """Parse ``"0,1;4"`` or ``"{0,1},4"`` style strings (generator, order)."""
        body = text.strip().replace("{", "").replace("}", "")
        if ";" in body:
            gen_txt, order_txt = body.split(";", 1)
        else:
            parts = [p for p in body.split(",") if p.strip()]
            if len(parts) < 2:
                raise GeometryError(f"cannot parse fractal spec {text!r}")
            gen_txt, order_txt = ",".join(parts[:-1]), parts[-1]
        try:
            gen = tuple(int(g) for g in gen_txt.split(",") if g.strip())
            order = int(order_txt)
        except ValueError as exc:
            raise GeometryError(f"cannot parse fractal spec {text!r}") from exc
        return cls(gen, order)


@dataclass(frozen=True)
class Beampattern:
    angles_rad: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if np.shape(self.angles_rad) != np.shape(self.values):
            raise GeometryError("angles and values must have the same length")


def fractal_array(spec: FractalSpec, pitch_m: float, aperture: int | None = None) -> ArrayGeometry:
    """Recursively generated fractal array.

    ``W_0 = {0}`` and ``W_{r+1}`` is the union of ``W_r + n * L**r`` over the
    generator, with translation factor ``L = 2 * max(generator) + 1``.
    If ``aperture`` is given, arrays reaching index ``aperture`` or beyond are
    rejected rather than clipped.
    """
    if not isinstance(spec, FractalSpec):
        spec = FractalSpec(*spec)
    L = 2 * max(spec.generator) + 1
    w = {0}
    for r in range(spec.order):
        w = {p + n * L**r for n in spec.generator for p in w}
    positions = tuple(sorted(w))
    if aperture is not None and positions[-1] >= aperture:
        raise GeometryError(
            f"fractal array spans index {positions[-1]} but the aperture has only {aperture} elements"
        )
    return ArrayGeometry(positions, pitch_m)


def sum_coarray(a: ArrayGeometry) -> ArrayGeometry:
    pos = np.asarray(a.positions)
    sums = np.unique(np.add.outer(pos, pos))
    return ArrayGeometry(tuple(sums.tolist()), a.pitch_m)


def sin_grid(n: int = 512) -> np.ndarray:
    """Angles whose sines are uniform on [-1, 1]."""
    return np.arcsin(np.linspace(-1.0, 1.0, n))


def _phase_step(angles, omega0, pitch_m, c):
    if not c > 0 or not omega0 > 0:
        raise GeometryError("sound speed and center frequency must be positive")
    return -1j * omega0 * pitch_m * np.sin(np.asarray(angles, dtype=float)) / c


def das_beampattern(a: ArrayGeometry, angles: Iterable[float] | None = None, omega0: float = 2 * np.pi * 2.72e6,
                    c: float = 1540.0) -> Beampattern:
    """Array factor with the aperture's geometric center as phase reference."""
    angles = sin_grid() if angles is None else np.asarray(angles, dtype=float)
    step = _phase_step(angles, omega0, a.pitch_m, c)
    pos = np.asarray(a.positions, dtype=float)
    centered = pos - 0.5 * (pos[0] + pos[-1])
    values = np.exp(np.outer(step, centered)).sum(axis=1)
    return Beampattern(angles, values)


def coba_apodization(a: ArrayGeometry) -> np.ndarray:
    """Intrinsic apodization: the indicator vector convolved with itself."""
    ind = a.indicator()
    return np.rint(np.convolve(ind, ind))


def coba_beampattern(a: ArrayGeometry, angles: Iterable[float] | None = None, omega0: float = 2 * np.pi * 2.72e6,
                     c: float = 1540.0) -> Beampattern:
    """Convolutional-beamforming pattern as one polynomial over the sum co-array."""
    angles = sin_grid() if angles is None else np.asarray(angles, dtype=float)
    step = _phase_step(angles, omega0, a.pitch_m, c)
    weights = coba_apodization(a)
    n = np.arange(weights.size) - float(a.positions[0] + a.positions[-1])
    keep = weights != 0
    values = np.exp(np.outer(step, n[keep])) @ weights[keep]
    return Beampattern(angles, values)


def mainlobe_width(bp: Beampattern, level: float = 0.5) -> float:
    """Width in sin(theta) of the main lobe at ``level`` of the broadside peak."""
    mag = np.abs(bp.values)
    s = np.sin(bp.angles_rad)
    peak = int(np.argmax(mag))
    thr = level * mag[peak]
    lo = peak
    while lo > 0 and mag[lo] >= thr:
        lo -= 1
    hi = peak
    while hi < mag.size - 1 and mag[hi] >= thr:
        hi += 1
    return float(s[hi] - s[lo])
