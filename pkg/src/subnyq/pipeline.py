"""End-to-end processing: phantoms to channel frames, frames to beamformed lines, recovery.

Arrays flowing between stages are stacks: frames are (F, M, N) channel traces,
line sets are (F, A, N) real samples, and Fourier line sets are (F, A, K) complex
coefficients on a shared harmonic index vector.  Every per-angle job is independent,
so threaded execution returns exactly what the serial path returns.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import lista
from .acquisition import ChannelFrame, CystRegion, ImagingConfig, Phantom, Pulse, simulate_channels, speckle_phantom
from .coba import cfcoba_line, coba_line
from .das import das_line
from .fdbf import (DEFAULT_N1, DEFAULT_N2, FourierLine, cached_table, distortion_table, fdbf_line,
                   mirror_table, select_subsample)
from .geometry import ArrayGeometry, FractalSpec, fractal_array
from .recovery import build_operator, ista_batch, preprocess_to_time, reconstruct_line

logger = logging.getLogger(__name__)

BEAMFORMERS = ("das", "fdbf", "coba", "cfcoba")
RECOVERIES = ("none", "ista", "lista")


def _map(fn, items, jobs: int = 1):
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def receive_array(config: ImagingConfig, spec: FractalSpec | None) -> ArrayGeometry:
    """Full aperture, or a fractal subset shifted to sit in the middle of the aperture."""
    if spec is None:
        return ArrayGeometry.ula(config.element_count, config.pitch_m)
    sub = fractal_array(spec, config.pitch_m, aperture=config.element_count)
    offset = (config.element_count - 1 - max(sub.positions)) // 2
    return ArrayGeometry(tuple(p + offset for p in sub.positions), config.pitch_m)


def is_mirror_symmetric(positions, element_count: int) -> bool:
    pos = np.asarray(positions)
    return np.array_equal(np.sort(element_count - 1 - pos), pos)


# --- phantoms and frames ---------------------------------------------------

def training_phantom(rng: np.random.Generator, density_per_mm2: float,
                     depth_range_m=(0.02, 0.125)) -> Phantom:
    """Speckle with a few random anechoic cysts and bright point reflectors."""
    cysts = []
    for _ in range(int(rng.integers(1, 4))):
        z = rng.uniform(0.035, 0.105)
        x = rng.uniform(-0.6, 0.6) * z
        cysts.append(CystRegion((float(x), float(z)), float(rng.uniform(0.003, 0.009)), 0.0, 1.0))
    pts = []
    for _ in range(int(rng.integers(0, 4))):
        z = rng.uniform(0.03, 0.11)
        pts.append((rng.uniform(-0.6, 0.6) * z, z, rng.choice([-1.0, 1.0]) * rng.uniform(3.0, 8.0)))
    return speckle_phantom(rng, density_per_mm2, depth_range_m, cysts=cysts, points=pts)


def simulate_frames(phantoms, config: ImagingConfig, jobs: int = 1) -> np.ndarray:
    return np.stack(_map(lambda p: simulate_channels(p, config).traces, phantoms, jobs))


# --- beamforming -----------------------------------------------------------

def das_lines(frames: np.ndarray, config: ImagingConfig, positions=None, jobs: int = 1) -> np.ndarray:
    """Full-rate DAS for every frame and angle, (F, A, N)."""
    angles = config.angles_rad

    def one(a):
        return np.stack([das_line(ChannelFrame(0.0, fr, config), angles[a], positions).samples for fr in frames])

    return np.stack(_map(one, range(len(angles)), jobs), axis=1)


def coba_lines(frames: np.ndarray, config: ImagingConfig, array: ArrayGeometry, jobs: int = 1) -> np.ndarray:
    angles = config.angles_rad

    def one(a):
        return np.stack([coba_line(ChannelFrame(0.0, fr, config), array, angles[a]).samples for fr in frames])

    return np.stack(_map(one, range(len(angles)), jobs), axis=1)


def channel_coefficients(frames: np.ndarray, mu, positions) -> np.ndarray:
    """Sub-sampled Fourier-series coefficients of every channel, (F, M_used, K)."""
    n = frames.shape[-1]
    return np.fft.rfft(frames[:, np.asarray(positions)], axis=-1)[..., np.asarray(mu)] / n


def product_band(mu, config: ImagingConfig) -> tuple[np.ndarray, int]:
    """Harmonics of the double-frequency product band and the downshift bringing it to the carrier."""
    mu = np.asarray(mu)
    return np.unique(mu[:, None] + mu[None, :]), config.carrier_harmonic


@dataclass
class FourierSet:
    """Beamformed coefficients for (frames, angles) on a shared harmonic vector of an ``n``-point line."""

    indices: np.ndarray
    values: np.ndarray  # (F, A, K)
    n: int
    T_seconds: float
    squared: bool = False

    def time_lines(self) -> np.ndarray:
        line = FourierLine(self.indices, self.values, self.T_seconds, self.n)
        return preprocess_to_time(line, self.n)


def fourier_lines(frames: np.ndarray, config: ImagingConfig, method: str, mu, array: ArrayGeometry,
                  n1: int = DEFAULT_N1, n2: int = DEFAULT_N2, jobs: int = 1, cache_dir=None) -> FourierSet:
    """FDBF or CFCOBA on sub-sampled channel coefficients for every frame and angle.

    CFCOBA keeps the double-frequency band of the convolutional beam and moves it down by
    the carrier harmonic so it lives on the original ``N``-point grid.
    """
    if method not in ("fdbf", "cfcoba"):
        raise ValueError(f"{method!r} is not a Fourier-domain beamformer")
    mu = np.asarray(mu, dtype=np.int64)
    pos = np.asarray(array.positions)
    n = config.samples_per_line
    T = config.depth_time_s
    chans = channel_coefficients(frames, mu, pos)
    angles = np.asarray(config.angles_rad)
    symmetric = is_mirror_symmetric(pos, config.element_count)
    mirror_pos = np.sort(config.element_count - 1 - pos)
    band, shift = product_band(mu, config)

    # a +theta/-theta pair shares one table when the array is symmetric
    groups: list[list[int]] = []
    for a, th in enumerate(angles):
        partner = [g for g in groups if symmetric and np.isclose(angles[g[0]], -th)]
        if partner:
            partner[0].append(a)
        else:
            groups.append([a])

    def apply(table, a):
        out = []
        for f in range(frames.shape[0]):
            line = FourierLine(mu, chans[f], T, n)
            if method == "fdbf":
                out.append(fdbf_line(line, table).values)
            else:
                out.append(cfcoba_line(line, table).restrict(band).values)
        return np.stack(out)

    def one(group):
        lead = max(group, key=lambda i: angles[i])
        table = cached_table(config, float(angles[lead]), mu, n1, n2, pos, cache_dir)
        res = {lead: apply(table, lead)}
        for a in group:
            if a != lead:
                res[a] = apply(mirror_table(table, float(angles[a]), mirror_pos), a)
        return res

    results = {}
    for res in _map(one, groups, jobs):
        results.update(res)
    values = np.stack([results[a] for a in range(len(angles))], axis=1)
    if method == "fdbf":
        return FourierSet(mu, values, n, T)
    return FourierSet(band - shift, values, n, T, squared=True)


def recovery_pulse(config: ImagingConfig, squared: bool) -> Pulse:
    """Pulse model of the beamformed line: the transmit pulse, or its shifted double-frequency lobe."""
    pulse = config.pulse()
    if not squared:
        return pulse
    return pulse.squared().shifted(config.carrier_harmonic / config.depth_time_s)


def ista_lines(fset: FourierSet, pulse: Pulse, iters: int = 100, lam_scale: float = 0.05) -> np.ndarray:
    """ISTA sparse codes convolved back with the pulse model, (F, A, N)."""
    op = build_operator(pulse, fset.indices, fset.n)
    F, A, K = fset.values.shape
    codes = ista_batch(fset.values.reshape(F * A, K), op, lam_scale, iters=iters)
    lines = np.stack([reconstruct_line(c, pulse).samples for c in codes])
    return lines.reshape(F, A, fset.n)


# --- learned recovery ---------------------------------------------------------

def line_scales(lines: np.ndarray) -> np.ndarray:
    s = np.max(np.abs(lines), axis=-1)
    return np.where(s > 0, s, 1.0)


def training_pairs(inputs: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Scale each input line to unit peak, the target by the same factor and a global gain.

    The gain is the median target-to-input peak ratio, so targets also sit near unit
    peak while the relative brightness of lines is preserved.
    """
    x = inputs.reshape(-1, inputs.shape[-1])
    y = targets.reshape(-1, targets.shape[-1])
    s = line_scales(x)
    gain = float(np.median(np.max(np.abs(y), axis=-1) / s))
    if not gain > 0:
        gain = 1.0
    return x / s[:, None], y / (s[:, None] * gain), gain


def apply_lista(model: lista.ListaModel, lines: np.ndarray, gain: float | None = None) -> np.ndarray:
    """Run the network on every line of a stack, undoing the per-line input scaling."""
    gain = model.gain if gain is None else gain
    shape = lines.shape
    x = lines.reshape(-1, shape[-1])
    s = line_scales(x)
    out, _ = lista.forward(model, x / s[:, None])
    return (out * (s * gain)[:, None]).reshape(shape)


def beam_support_mask(config: ImagingConfig, positions=None) -> np.ndarray:
    """(A, N) mask of samples before each line's support limit."""
    from .fdbf import beam_support_time

    t = config.time_axis
    return np.stack([t < beam_support_time(config, th, positions) for th in config.angles_rad])


def frame_nrmse(estimate: np.ndarray, reference: np.ndarray, mask: np.ndarray | None = None) -> float:
    """``||est - ref|| / ||ref||`` over all lines of a frame, optionally masked."""
    e = np.asarray(estimate, dtype=float)
    r = np.asarray(reference, dtype=float)
    if mask is not None:
        e, r = e[mask], r[mask]
    denom = np.linalg.norm(r)
    return float(np.linalg.norm(e - r) / denom) if denom > 0 else float(np.linalg.norm(e))


def budget_mu(config: ImagingConfig, budget: int, strategy: str = "central-band", seed: int = 0) -> np.ndarray:
    return select_subsample(config.pulse(), budget, config.samples_per_line, strategy, seed)


# --- timing ------------------------------------------------------------------

@dataclass
class Timing:
    n: int
    lista_s: float
    dense_ista_s: float


def _best_time(fn, repeats: int) -> float:
    import time

    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return float(best)


def complexity_benchmark(sizes=(480, 960, 1920, 3840), layers: int = 30, ista_iters: int = 100,
                         budget_ratio: float = 230 / 1920, repeats: int = 5, seed: int = 0,
                         config: ImagingConfig | None = None, batch: int = 16) -> list[Timing]:
    """Per-line wall time of the network and of matrix-form ISTA at several line lengths.

    The harmonic budget scales with ``n`` so that both solvers face the same problem
    family; the dense matrices are built once per size and excluded from the timing.
    Both solvers process ``batch`` lines per call and the time is divided by ``batch``,
    which keeps fixed per-call overhead from masking the growth with ``n``.
    """
    from .recovery import dense_ista, spectral_norm_sq

    config = ImagingConfig() if config is None else config
    pulse = config.pulse()
    rng = np.random.default_rng(seed)
    out = []
    for n in sizes:
        model = lista.init_model(layers, n, seed=seed)
        lines = rng.standard_normal((batch, n))
        t_lista = _best_time(lambda: lista.forward(model, lines), repeats) / batch
        k = max(1, int(round(budget_ratio * n)))
        centre = int(round(config.center_freq_hz / config.fs_hz * n))
        mu = np.arange(max(1, centre - k // 2), max(1, centre - k // 2) + k)
        op = build_operator(pulse, mu, n)
        A = op.matrix()
        step = 0.99 / spectral_norm_sq(op)
        W_e = step * np.conj(A).T
        W_t = np.eye(n) - step * np.real(np.conj(A).T @ A)
        Y = op.forward(rng.standard_normal((batch, n))).T
        thr = 0.05 * step * float(np.max(np.abs(op.adjoint(Y[:, 0]))))
        t_ista = _best_time(lambda: dense_ista(Y, W_t, W_e, thr, ista_iters), repeats) / batch
        out.append(Timing(int(n), t_lista, t_ista))
    return out


def r_squared(x, y, powers) -> float:
    """Coefficient of determination of a least-squares fit ``y ~ sum_p c_p x**p``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    X = np.stack([x**p for p in powers], axis=1)
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    tot = np.sum((y - y.mean()) ** 2)
    return float(1.0 - np.sum(resid**2) / tot) if tot > 0 else 1.0


__all__ = [
    "BEAMFORMERS", "RECOVERIES", "FourierSet", "receive_array", "training_phantom", "simulate_frames",
    "das_lines", "coba_lines", "fourier_lines", "recovery_pulse", "ista_lines", "training_pairs",
    "apply_lista", "beam_support_mask", "frame_nrmse", "budget_mu", "distortion_table",
    "complexity_benchmark", "r_squared",
]
