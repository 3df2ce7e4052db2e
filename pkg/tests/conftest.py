import numpy as np
import pytest

from subnyq.acquisition import ImagingConfig

# (criterion, passed, detail) rows filled by test_acceptance.py
ACCEPTANCE = []


def record(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE.append((criterion, bool(passed), detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for crit, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {crit:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def config():
    return ImagingConfig()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY_CONFIG = """\
imaging:
  angles: {min_deg: -10, max_deg: 10, count: 5}
method: {beamformer: fdbf, recovery: lista}
lista: {layers: 3}
training: {epochs_max: 2, batch_size: 4}
simulation: {density_per_mm2: 2}
"""

PIPELINE_OUTPUTS = ("tr/frames.bin", "te/frames.bin", "tr_das.bin", "tr_fd.bin", "te_fd.bin", "te_das.bin",
                    "m.lista", "m.lista.loss.csv", "te_lista.bin", "te_ista.bin", "m.csv", "das.png")


def run_pipeline(workdir, jobs=1):
    """simulate -> beamform -> train -> recover -> eval -> render on a tiny configuration."""
    from subnyq.cli import main

    workdir.mkdir(parents=True, exist_ok=True)
    cfg = workdir / "tiny.yaml"
    cfg.write_text(TINY_CONFIG)

    def run(*argv):
        code = main([argv[0], "--config", str(cfg), "--jobs", str(jobs), *[str(a) for a in argv[1:]]])
        assert code == 0, argv

    w = workdir
    run("simulate", "--phantom", "training:2", "--out", w / "tr", "--seed", 3)
    run("simulate", "--phantom", "cyst", "--out", w / "te")
    run("beamform", "--frames", w / "tr", "--method", "das", "--out", w / "tr_das.bin")
    run("beamform", "--frames", w / "tr", "--out", w / "tr_fd.bin")
    run("beamform", "--frames", w / "te", "--out", w / "te_fd.bin")
    run("beamform", "--frames", w / "te", "--method", "das", "--out", w / "te_das.bin")
    run("train", "--dataset", w / "tr_fd.bin", "--reference", w / "tr_das.bin", "--model-out", w / "m.lista")
    run("recover", "--dataset", w / "te_fd.bin", "--model", w / "m.lista", "--out", w / "te_lista.bin")
    run("recover", "--dataset", w / "te_fd.bin", "--solver", "ista", "--out", w / "te_ista.bin")
    run("eval", "--lines", w / "te_lista.bin", "--reference", w / "te_das.bin", "--out", w / "m.csv")
    run("render", "--lines", w / "te_das.bin", "--out", w / "das.png")
    return {name: (w / name).read_bytes() for name in PIPELINE_OUTPUTS}


@pytest.fixture(scope="session")
def tiny_pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    return root, run_pipeline(root / "a", jobs=1)
