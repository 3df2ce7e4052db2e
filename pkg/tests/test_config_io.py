import json

import numpy as np
import pytest

from subnyq.config import ConfigError, RunConfig, format_array, load_config, parse_array, with_overrides
from subnyq.geometry import FractalSpec
from subnyq.io import ContainerError, load_array, save_array, sidecar


def test_defaults():
    cfg = load_config()
    assert cfg.imaging.element_count == 64
    assert cfg.budget == 230 and cfg.layers == 30
    assert cfg.training.lr_init == 1e-3 and cfg.training.epochs_max == 120
    assert cfg.beamformer == "fdbf" and cfg.recovery == "lista"


def test_yaml_scientific_strings(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("imaging:\n  fs_hz: 10.8e6\n  center_freq_hz: 2.72e6\n")
    cfg = load_config(p)
    assert cfg.imaging.fs_hz == 10.8e6


@pytest.mark.parametrize("text,field,line", [
    ("seed: 1\nsubsampling:\n  budget: 5000\n", "subsampling.budget", 3),
    ("method:\n  beamformer: das\n  recovery: lista\n", "method.recovery", 3),
    ("imaging:\n  element_count: 64\n  bogus: 1\n", "imaging.bogus", 3),
    ("lista:\n  taps: four\n", "lista.taps", 2),
    ("array: fractal:0,1;9\n", "array", 1),
])
def test_errors_name_field_and_line(tmp_path, text, field, line):
    p = tmp_path / "bad.yaml"
    p.write_text(text)
    with pytest.raises(ConfigError) as err:
        load_config(p)
    assert err.value.field == field
    assert err.value.line == line
    assert f"bad.yaml:{line}" in str(err.value)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.yaml")


def test_array_spec_round_trip():
    assert parse_array("full") is None
    spec = parse_array("fractal:0,1;4")
    assert spec == FractalSpec((0, 1), 4)
    assert parse_array(format_array(spec)) == spec


@pytest.mark.parametrize("budget,array,expected", [(230, "full", 8.3), (130, "full", 14.8), (230, "fractal:0,1;4", 33.4)])
def test_reduction_factor(budget, array, expected):
    cfg = with_overrides(RunConfig(), budget=budget, array=array, method="fdbf")
    assert round(cfg.reduction_factor(), 1) == expected


def test_overrides_validate():
    with pytest.raises(ConfigError):
        with_overrides(RunConfig(), method="das+ista")
    cfg = with_overrides(RunConfig(), seed=4, method="cfcoba+ista")
    assert (cfg.seed, cfg.beamformer, cfg.recovery) == (4, "cfcoba", "ista")


def test_digest_changes_with_content():
    a = RunConfig()
    assert a.digest() == RunConfig().digest()
    assert a.digest() != with_overrides(a, budget=130).digest()


def test_container_round_trip_fixed_point(tmp_path, rng):
    data = (rng.standard_normal((2, 3, 7)) + 1j * rng.standard_normal((2, 3, 7))).astype(np.complex64)
    first = save_array(tmp_path / "a.bin", data, "fourier-lines", {"indices": [1, 2, 3], "n": 1920})
    back, meta = load_array(first, "fourier-lines")
    second = save_array(tmp_path / "b.bin", back, "fourier-lines", meta)
    assert first.read_bytes() == second.read_bytes()
    assert sidecar(first).read_text() == sidecar(second).read_text()
    np.testing.assert_array_equal(back, data)


def test_container_errors(tmp_path):
    path = save_array(tmp_path / "x.bin", np.zeros((2, 2)), "lines")
    with pytest.raises(ContainerError, match="expected"):
        load_array(path, "frames")
    header = json.loads(sidecar(path).read_text())
    header["format_version"] = 2
    sidecar(path).write_text(json.dumps(header))
    with pytest.raises(ContainerError, match="version"):
        load_array(path)
    with pytest.raises(ContainerError):
        load_array(tmp_path / "missing.bin")
    path = save_array(tmp_path / "y.bin", np.zeros((2, 2)), "lines")
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(ContainerError, match="bytes"):
        load_array(path)
