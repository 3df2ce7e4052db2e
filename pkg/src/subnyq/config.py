"""Run configuration read from YAML, with line numbers in validation errors.

Every field has a default, so an empty file (or no file) describes the reference
setup: 64 elements, 2.72 MHz, 10.8 MHz sampling, 1920 samples per line, budget 230,
a 30-layer network.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from .acquisition import ImagingConfig
from .fdbf import DEFAULT_N1, DEFAULT_N2, in_band
from .geometry import FractalSpec, GeometryError
from .lista import TrainConfig

STRATEGIES = ("central-band", "random-in-band")
BEAMFORMERS = ("das", "fdbf", "coba", "cfcoba")
RECOVERIES = ("none", "ista", "lista")
# beamformers whose output is a set of Fourier coefficients that a solver can act on
FOURIER_BEAMFORMERS = ("fdbf", "cfcoba")

SCHEMA = {
    "imaging": {
        "element_count": int, "pitch_m": (float, type(None)), "fs_hz": float, "c_mps": float,
        "samples_per_line": int, "center_freq_hz": float, "fractional_bandwidth": float,
        "angles": {"min_deg": float, "max_deg": float, "count": int},
    },
    "subsampling": {"budget": int, "strategy": str, "seed": int},
    "array": str,
    "method": {"beamformer": str, "recovery": str},
    "distortion": {"n1": int, "n2": int},
    "ista": {"iterations": int, "lambda_scale": float},
    "lista": {"layers": int, "channels": int, "taps": int, "fixed_g": bool, "per_angle": bool},
    "training": {"epochs_max": int, "lr_init": float, "patience": int, "factor": float, "lr_floor": float,
                 "batch_size": int, "seed": int, "epsilon": float},
    "simulation": {"density_per_mm2": float, "training_frames": int},
    "paths": {"cache_dir": (str, type(None))},
    "seed": int,
}


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str, line: int | None = None, source: str = "<config>"):
        where = f"{source}:{line}" if line is not None else source
        super().__init__(f"{where}: field '{field_name}': {message}")
        self.field = field_name
        self.line = line


def parse_array(text: str) -> FractalSpec | None:
    """``full`` or ``fractal:G,r`` (for example ``fractal:0,1;4`` or ``fractal:{0,1},4``)."""
    text = text.strip()
    if text == "full":
        return None
    if text.startswith("fractal:"):
        return FractalSpec.parse(text[len("fractal:"):])
    raise GeometryError(f"array must be 'full' or 'fractal:G,r', got {text!r}")


def format_array(spec: FractalSpec | None) -> str:
    if spec is None:
        return "full"
    return "fractal:" + ",".join(str(g) for g in spec.generator) + f";{spec.order}"


@dataclass
class RunConfig:
    imaging: ImagingConfig = field(default_factory=ImagingConfig)
    budget: int = 230
    strategy: str = "central-band"
    subsample_seed: int = 0
    array: FractalSpec | None = None
    beamformer: str = "fdbf"
    recovery: str = "lista"
    n1: int = DEFAULT_N1
    n2: int = DEFAULT_N2
    ista_iterations: int = 100
    lambda_scale: float = 0.05
    layers: int = 30
    channels: int = 1
    taps: int = 5
    fixed_g: bool = False
    per_angle: bool = False
    training: TrainConfig = field(default_factory=TrainConfig)
    density_per_mm2: float = 10.0
    training_frames: int = 8
    cache_dir: str | None = None
    seed: int = 0

    def validate(self, lines: dict | None = None, source: str = "<config>") -> "RunConfig":
        lines = lines or {}

        def fail(name, msg):
            raise ConfigError(name, msg, lines.get(name), source)

        if self.strategy not in STRATEGIES:
            fail("subsampling.strategy", f"must be one of {', '.join(STRATEGIES)}")
        if self.beamformer not in BEAMFORMERS:
            fail("method.beamformer", f"must be one of {', '.join(BEAMFORMERS)}")
        if self.recovery not in RECOVERIES:
            fail("method.recovery", f"must be one of {', '.join(RECOVERIES)}")
        if self.recovery != "none" and self.beamformer not in FOURIER_BEAMFORMERS:
            fail("method.recovery", f"{self.recovery} needs a Fourier-domain beamformer (fdbf or cfcoba)")
        if self.n1 < 0 or self.n2 < 0:
            fail("distortion.n1", "distortion bandwidths must be non-negative")
        if self.layers < 1:
            fail("lista.layers", "at least one layer is required")
        if self.taps < 1 or self.taps % 2 == 0:
            fail("lista.taps", "kernel length must be odd")
        if self.ista_iterations < 1:
            fail("ista.iterations", "must be >= 1")
        if self.array is not None and max(self.array_positions_raw()) >= self.imaging.element_count:
            fail("array", f"fractal array does not fit in {self.imaging.element_count} elements")
        band = in_band(self.imaging.pulse(), self.imaging.samples_per_line)
        if not 1 <= self.budget <= band.size:
            fail("subsampling.budget", f"must lie in [1, {band.size}] (in-band harmonics)")
        return self

    def array_positions_raw(self) -> tuple[int, ...]:
        from .geometry import fractal_array

        return fractal_array(self.array, self.imaging.pitch_m).positions

    @property
    def elements_used(self) -> int:
        if self.array is None:
            return self.imaging.element_count
        return len(self.array_positions_raw())

    def reduction_factor(self) -> float:
        """``(N * M_full) / (budget * M_used)``; 1 for full-rate beamformers."""
        if self.beamformer in ("das", "coba"):
            return float(self.imaging.element_count) / self.elements_used
        return (self.imaging.samples_per_line * self.imaging.element_count) / (self.budget * self.elements_used)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["imaging"] = self.imaging.to_dict()
        d["array"] = format_array(self.array)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _key_lines(node, prefix: str = "") -> dict:
    """Map dotted key paths to 1-based line numbers from a composed YAML tree."""
    out = {}
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            name = f"{prefix}{k.value}"
            out[name] = k.start_mark.line + 1
            out.update(_key_lines(v, name + "."))
    return out


def _coerce(value, kind, name, lines, source):
    kinds = kind if isinstance(kind, tuple) else (kind,)
    if value is None and type(None) in kinds:
        return None
    for k in kinds:
        if k is type(None):
            continue
        if k is bool:
            if isinstance(value, bool):
                return value
            continue
        if k is int and isinstance(value, int) and not isinstance(value, bool):
            return value
        if k is float and isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if k is float and isinstance(value, str):
            try:  # YAML 1.1 reads "10.8e6" as a string
                return float(value)
            except ValueError:
                pass
        if k is str and isinstance(value, str):
            return value
    names = "/".join("null" if k is type(None) else k.__name__ for k in kinds)
    raise ConfigError(name, f"expected {names}, got {value!r}", lines.get(name), source)


def _walk(data, schema, lines, source, prefix=""):
    if not isinstance(data, dict):
        raise ConfigError(prefix.rstrip(".") or "<root>", "expected a mapping", lines.get(prefix.rstrip(".")), source)
    out = {}
    for key, value in data.items():
        name = f"{prefix}{key}"
        if key not in schema:
            raise ConfigError(name, "unknown field", lines.get(name), source)
        sub = schema[key]
        if isinstance(sub, dict):
            out[key] = _walk(value if value is not None else {}, sub, lines, source, name + ".")
        else:
            out[key] = _coerce(value, sub, name, lines, source)
    return out


def from_mapping(data: dict, lines: dict | None = None, source: str = "<config>") -> RunConfig:
    lines = lines or {}
    d = _walk(data or {}, SCHEMA, lines, source)
    img = dict(d.get("imaging", {}))
    angles = img.pop("angles", None)
    kwargs = {}
    if angles:
        lo, hi, cnt = angles.get("min_deg", -45.0), angles.get("max_deg", 45.0), angles.get("count", 65)
        if cnt < 1:
            raise ConfigError("imaging.angles.count", "must be >= 1", lines.get("imaging.angles.count"), source)
        kwargs["angles_rad"] = tuple(np.deg2rad(np.linspace(lo, hi, cnt)).tolist())
    try:
        imaging = ImagingConfig(**img, **kwargs)
        imaging.pulse()
    except ValueError as exc:
        raise ConfigError("imaging", str(exc), lines.get("imaging"), source) from exc
    sub = d.get("subsampling", {})
    meth = d.get("method", {})
    dist = d.get("distortion", {})
    ista = d.get("ista", {})
    net = d.get("lista", {})
    sim = d.get("simulation", {})
    try:
        training = TrainConfig(**d.get("training", {}))
    except ValueError as exc:
        raise ConfigError("training", str(exc), lines.get("training"), source) from exc
    try:
        array = parse_array(d.get("array", "full"))
    except (GeometryError, ValueError) as exc:
        raise ConfigError("array", str(exc), lines.get("array"), source) from exc
    cfg = RunConfig(
        imaging=imaging,
        budget=sub.get("budget", 230),
        strategy=sub.get("strategy", "central-band"),
        subsample_seed=sub.get("seed", 0),
        array=array,
        beamformer=meth.get("beamformer", "fdbf"),
        recovery=meth.get("recovery", "lista"),
        n1=dist.get("n1", DEFAULT_N1),
        n2=dist.get("n2", DEFAULT_N2),
        ista_iterations=ista.get("iterations", 100),
        lambda_scale=ista.get("lambda_scale", 0.05),
        layers=net.get("layers", 30),
        channels=net.get("channels", 1),
        taps=net.get("taps", 5),
        fixed_g=net.get("fixed_g", False),
        per_angle=net.get("per_angle", False),
        training=training,
        density_per_mm2=sim.get("density_per_mm2", 10.0),
        training_frames=sim.get("training_frames", 8),
        cache_dir=d.get("paths", {}).get("cache_dir"),
        seed=d.get("seed", 0),
    )
    return cfg.validate(lines, source)


def load_config(path=None) -> RunConfig:
    """Parse and validate a YAML run configuration; ``None`` gives the defaults."""
    if path is None:
        return RunConfig().validate()
    path = Path(path)
    if not path.exists():
        raise ConfigError("<file>", "configuration file not found", None, str(path))
    text = path.read_text()
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError("<syntax>", str(getattr(exc, "problem", exc)),
                          mark.line + 1 if mark else None, str(path)) from exc
    return from_mapping(data or {}, _key_lines(node) if node is not None else {}, str(path))


def with_overrides(cfg: RunConfig, seed=None, method=None, budget=None, array=None) -> RunConfig:
    """Apply command-line overrides; ``method`` is ``beamformer`` or ``beamformer+recovery``."""
    changes = {}
    if seed is not None:
        changes["seed"] = seed
    if method is not None:
        bf, _, rec = method.partition("+")
        changes["beamformer"] = bf
        changes["recovery"] = rec or "none"
    if budget is not None:
        changes["budget"] = budget
    if array is not None:
        try:
            changes["array"] = parse_array(array)
        except (GeometryError, ValueError) as exc:
            raise ConfigError("--array", str(exc), None, "<command line>") from exc
    return replace(cfg, **changes).validate(source="<command line>")
