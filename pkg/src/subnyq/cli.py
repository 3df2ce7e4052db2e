"""Command-line entry point: ``subnyq <verb> [options]``.

Verbs run one pipeline stage each and exchange float32 containers (see :mod:`subnyq.io`):

    simulate   phantom -> channel frames
    beamform   channel frames -> beamformed lines (das, coba) or coefficients (fdbf, cfcoba)
    train      coefficients + DAS reference -> network model and loss history
    recover    coefficients -> lines (none, ista or lista)
    eval       lines -> metrics CSV; prints the data-reduction factor
    render     lines -> 8-bit grayscale image (.pgm or .png)
    bench      per-line timing of the network versus matrix-form ISTA
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io, lista, metrics
from . import pipeline as P
from .acquisition import (AcquisitionError, ChannelFrame, add_noise, cyst_phantom, load_phantom,
                          wire_phantom)
from .config import ConfigError, RunConfig, format_array, load_config, with_overrides

logger = logging.getLogger("subnyq")


class CliError(Exception):
    pass


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    return with_overrides(cfg, seed=args.seed, method=getattr(args, "method", None),
                          budget=getattr(args, "budget", None), array=getattr(args, "array", None))


def _jobs(args) -> int:
    return args.jobs if args.jobs is not None else (os.cpu_count() or 1)


def _check_config(meta: dict, cfg: RunConfig, path) -> None:
    key = meta.get("imaging_key")
    if key is not None and key != cfg.imaging.key():
        raise CliError(f"{path}: produced with a different imaging configuration")


def _cyst_meta(phantom) -> list:
    return [{"center_m": list(c.center_m), "radius_m": c.radius_m} for c in phantom.cysts]


# --- verbs -------------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = _config(args)
    img = cfg.imaging
    spec = args.phantom
    if spec == "cyst":
        phantoms = [cyst_phantom(cfg.seed, cfg.density_per_mm2)]
    elif spec == "wire":
        phantoms = [wire_phantom()]
    elif spec.startswith("training:"):
        count = int(spec.split(":", 1)[1])
        rng = np.random.default_rng(cfg.seed)
        phantoms = [P.training_phantom(rng, cfg.density_per_mm2) for _ in range(count)]
    else:
        phantoms = [load_phantom(spec)]
    frames = P.simulate_frames(phantoms, img, _jobs(args))
    if args.snr_db is not None:
        frames = np.stack([add_noise(ChannelFrame(0.0, fr, img), args.snr_db, cfg.seed + i).traces
                           for i, fr in enumerate(frames)])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"imaging": img.to_dict(), "imaging_key": img.key(), "phantom": spec, "seed": cfg.seed,
            "cysts": [_cyst_meta(p) for p in phantoms]}
    io.save_array(out / "frames.bin", frames, "channel-frames", meta)
    print(f"wrote {len(phantoms)} frame(s) of {img.element_count} x {img.samples_per_line} samples to {out}")
    return 0


def _frames_path(path) -> Path:
    path = Path(path)
    return path / "frames.bin" if path.is_dir() else path


def cmd_beamform(args) -> int:
    cfg = _config(args)
    img = cfg.imaging
    src = _frames_path(args.frames)
    frames, fmeta = io.load_array(src, "channel-frames")
    _check_config(fmeta, cfg, src)
    array = P.receive_array(img, cfg.array)
    base = {"imaging_key": img.key(), "beamformer": cfg.beamformer, "array": format_array(cfg.array),
            "elements": len(array.positions), "cysts": fmeta.get("cysts", [])}
    jobs = _jobs(args)
    if cfg.beamformer == "das":
        lines = P.das_lines(frames, img, array.positions, jobs)
        io.save_array(args.out, lines, "lines", {**base, "budget": img.samples_per_line, "squared": False})
    elif cfg.beamformer == "coba":
        lines = P.coba_lines(frames, img, array, jobs)
        io.save_array(args.out, lines, "lines", {**base, "budget": img.samples_per_line, "squared": False})
    else:
        mu = P.budget_mu(img, cfg.budget, cfg.strategy, cfg.subsample_seed)
        fset = P.fourier_lines(frames, img, cfg.beamformer, mu, array, cfg.n1, cfg.n2, jobs, cfg.cache_dir)
        meta = {**base, "budget": cfg.budget, "indices": fset.indices.tolist(), "n": fset.n,
                "T_seconds": fset.T_seconds, "squared": fset.squared}
        io.save_array(args.out, fset.values, "fourier-lines", meta)
    print(f"wrote {cfg.beamformer} output to {args.out}")
    return 0


def _fourier_set(values, meta) -> P.FourierSet:
    return P.FourierSet(np.asarray(meta["indices"]), values, meta["n"], meta["T_seconds"], meta["squared"])


def _input_lines(path) -> tuple[np.ndarray, dict, P.FourierSet | None]:
    values, meta = io.load_array(path, ("fourier-lines", "lines"))
    if np.iscomplexobj(values):
        fset = _fourier_set(values, meta)
        return fset.time_lines(), meta, fset
    return values, meta, None


def _model_paths(path: Path, angles: int) -> list[Path]:
    return [path.with_name(f"{path.stem}.angle{a:03d}{path.suffix}") for a in range(angles)]


def cmd_train(args) -> int:
    cfg = _config(args)
    train_cfg = cfg.training if args.epochs is None else replace(cfg.training, epochs_max=args.epochs)
    inputs, meta, _ = _input_lines(args.dataset)
    targets, _ = io.load_array(args.reference, "lines")
    if inputs.shape != targets.shape:
        raise CliError(f"dataset {inputs.shape} and reference {targets.shape} differ in shape")
    n = inputs.shape[-1]
    g_kernel = cfg.imaging.pulse().samples if cfg.fixed_g else None
    out = Path(args.model_out)
    out.parent.mkdir(parents=True, exist_ok=True)

    def fit(x, y):
        xi, yi, gain = P.training_pairs(x, y)
        init = lista.init_model(cfg.layers, n, cfg.channels, cfg.taps, seed=train_cfg.seed, g_kernel=g_kernel)
        res = lista.train(xi, yi, init, train_cfg)
        res.model.gain = gain
        return res

    if cfg.per_angle:
        paths = _model_paths(out, inputs.shape[1])
        histories = []
        for a, path in enumerate(paths):
            res = fit(inputs[:, a], targets[:, a])
            lista.save_model(res.model, path, train_cfg)
            histories.append(res.history)
        out.write_text(json.dumps({"per_angle": [p.name for p in paths]}, indent=1) + "\n")
        history = np.mean(np.array(histories), axis=0).tolist()
    else:
        res = fit(inputs, targets)
        lista.save_model(res.model, out, train_cfg)
        history = res.history
    loss_csv = out.with_name(out.name + ".loss.csv")
    with open(loss_csv, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(history):
            w.writerow([i, f"{v:.9g}"])
    print(f"trained {cfg.layers}-layer model for {len(history)} epochs, final loss {history[-1]:.6g}; wrote {out}")
    return 0


def _load_models(path: Path, angles: int) -> list[lista.ListaModel]:
    raw = path.read_bytes()
    if raw.startswith(lista.MODEL_MAGIC):
        return [lista.load_model(path)] * angles
    try:
        index = json.loads(raw.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise lista.ModelFileError(f"{path}: not a model file") from exc
    names = index.get("per_angle", [])
    if len(names) != angles:
        raise lista.ModelFileError(f"{path}: {len(names)} per-angle models for {angles} angles")
    return [lista.load_model(path.with_name(nm)) for nm in names]


def cmd_recover(args) -> int:
    cfg = _config(args)
    solver = args.solver or cfg.recovery
    values, meta = io.load_array(args.dataset, ("fourier-lines", "lines"))
    fset = _fourier_set(values, meta) if np.iscomplexobj(values) else None
    squared = bool(meta.get("squared", False))
    if solver == "none":
        lines = fset.time_lines() if fset is not None else values
    elif fset is None:
        raise CliError(f"{solver} recovery needs Fourier coefficients, {args.dataset} holds time lines")
    elif solver == "ista":
        lines = P.ista_lines(fset, P.recovery_pulse(cfg.imaging, fset.squared), cfg.ista_iterations, cfg.lambda_scale)
    elif solver == "lista":
        if args.model is None:
            raise CliError("lista recovery needs --model")
        x = fset.time_lines()
        models = _load_models(Path(args.model), x.shape[1])
        lines = np.stack([P.apply_lista(models[a], x[:, a]) for a in range(x.shape[1])], axis=1)
        squared = False
    else:
        raise CliError(f"unknown solver {solver!r}")
    out_meta = {k: meta[k] for k in ("imaging_key", "beamformer", "array", "elements", "budget", "cysts") if k in meta}
    out_meta.update({"recovery": solver, "squared": squared})
    io.save_array(args.out, lines, "lines", out_meta)
    print(f"wrote {solver} recovery of {lines.shape[0] * lines.shape[1]} lines to {args.out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    img = cfg.imaging
    lines, meta = io.load_array(args.lines, "lines")
    ref = io.load_array(args.reference, "lines")[0] if args.reference else None
    angles = np.asarray(img.angles_rad)
    if lines.shape[1] != angles.size:
        raise CliError(f"{args.lines} has {lines.shape[1]} lines per frame but the config has {angles.size} angles")
    squared = bool(meta.get("squared", False))
    label = meta.get("beamformer", "?") + ("+" + meta["recovery"] if meta.get("recovery", "none") != "none" else "")
    budget = int(meta.get("budget", img.samples_per_line))
    elements = int(meta.get("elements", img.element_count))
    factor = (img.samples_per_line * img.element_count) / (budget * elements)
    print(f"data reduction factor: {factor:.1f} ({img.samples_per_line} x {img.element_count}"
          f" / {budget} x {elements})")
    rows = []
    cysts = meta.get("cysts", [])
    for f, frame in enumerate(lines):
        try:
            ax, lat = metrics.point_resolution(frame, angles, img.fs_hz, img.c_mps, squared)
            ax, lat = ax * 1e3, lat * 1e3
        except metrics.MetricError as exc:
            logger.warning("frame %d: resolution unavailable (%s)", f, exc)
            ax = lat = math.nan
        value = math.nan
        if f < len(cysts) and cysts[f]:
            bm = metrics.bmode(frame, angles, img.fs_hz, img.c_mps, squared=squared)
            c = cysts[f][0]
            cm, bgm = metrics.cyst_masks(bm, c["center_m"], c["radius_m"])
            value = metrics.cnr(bm, cm, bgm)
        rows.append({"method": label, "budget": budget, "elements": elements, "axial_fwhm_mm": ax,
                     "lateral_fwhm_mm": lat, "cnr_db": value})
        if ref is not None:
            print(f"frame {f}: NRMSE vs reference {P.frame_nrmse(frame, ref[f]):.4f}")
    metrics.write_rows(args.out, rows)
    print(f"wrote {len(rows)} metric row(s) to {args.out}")
    return 0


def scan_convert(values: np.ndarray, angles_rad, depth_step_m: float, height: int = 512) -> np.ndarray:
    """Nearest-line, linearly interpolated polar-to-raster conversion of (angles, N) values."""
    from scipy.ndimage import map_coordinates

    angles = np.asarray(angles_rad, dtype=float)
    n = values.shape[1]
    r_max = (n - 1) * depth_step_m
    half = r_max * max(abs(np.sin(angles[0])), abs(np.sin(angles[-1])))
    width = max(2, int(round(height * 2 * half / r_max)))
    x = np.linspace(-half, half, width)
    z = np.linspace(0.0, r_max, height)
    X, Z = np.meshgrid(x, z)
    R = np.hypot(X, Z)
    TH = np.arctan2(X, Z)
    if angles.size > 1:
        ai = np.interp(TH, angles, np.arange(angles.size), left=-1.0, right=-1.0)
    else:
        ai = np.where(np.isclose(TH, angles[0]), 0.0, -1.0)
    si = R / depth_step_m
    inside = (ai >= 0) & (si <= n - 1)
    out = map_coordinates(values, [np.clip(ai, 0, None), np.clip(si, 0, n - 1)], order=1, mode="nearest")
    return np.where(inside, out, 0.0)


def cmd_render(args) -> int:
    from PIL import Image

    cfg = _config(args)
    img = cfg.imaging
    lines, meta = io.load_array(args.lines, "lines")
    frame = lines[args.frame]
    bm = metrics.bmode(frame, img.angles_rad, img.fs_hz, img.c_mps, args.dynamic_range,
                       squared=bool(meta.get("squared", False)))
    raster = scan_convert(bm.values, img.angles_rad, img.c_mps / (2 * img.fs_hz), args.height)
    pixels = np.clip(np.rint(raster * 255.0), 0, 255).astype(np.uint8)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(pixels, mode="L").save(args.out)
    print(f"wrote {pixels.shape[1]} x {pixels.shape[0]} image to {args.out}")
    return 0


def cmd_bench(args) -> int:
    sizes = tuple(int(s) for s in args.sizes.split(","))
    timings = P.complexity_benchmark(sizes, layers=args.layers, ista_iters=args.iterations, repeats=args.repeats,
                                     seed=args.seed or 0, batch=args.batch)
    n = [t.n for t in timings]
    a = [t.lista_s for t in timings]
    b = [t.dense_ista_s for t in timings]
    print(f"{'N':>6} {'lista_ms':>10} {'dense_ista_ms':>14}")
    for t in timings:
        print(f"{t.n:>6} {t.lista_s * 1e3:>10.3f} {t.dense_ista_s * 1e3:>14.3f}")
    print(f"lista linear fit R^2 = {P.r_squared(n, a, (0, 1)):.4f}")
    print(f"dense ISTA quadratic fit R^2 = {P.r_squared(n, b, (0, 1, 2)):.4f}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["n", "lista_s", "dense_ista_s"])
            for t in timings:
                w.writerow([t.n, f"{t.lista_s:.6g}", f"{t.dense_ista_s:.6g}"])
    return 0


# --- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--jobs", type=int, help="worker threads (default: available cores; 1 = reference path)")
    common.add_argument("--method", help="beamformer[+recovery], e.g. fdbf+lista, cfcoba+ista, das")
    common.add_argument("--budget", type=int, help="Fourier coefficients kept per channel")
    common.add_argument("--array", help="receive array: full or fractal:G,r (e.g. fractal:0,1;4)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="subnyq", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("simulate", parents=[common], help="simulate channel frames")
    p.add_argument("--phantom", default="cyst", help="phantom file, or cyst | wire | training:COUNT")
    p.add_argument("--snr-db", type=float, help="add white noise at this SNR")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("beamform", parents=[common], help="beamform channel frames")
    p.add_argument("--frames", required=True, help="frames file or directory from simulate")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_beamform)

    p = sub.add_parser("train", parents=[common], help="train the unfolded network")
    p.add_argument("--dataset", required=True, help="beamformed coefficients or lines")
    p.add_argument("--reference", required=True, help="full-rate DAS lines of the same frames")
    p.add_argument("--model-out", required=True)
    p.add_argument("--epochs", type=int, help="override training.epochs_max")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("recover", parents=[common], help="recover lines from coefficients")
    p.add_argument("--dataset", required=True)
    p.add_argument("--solver", choices=("none", "ista", "lista"))
    p.add_argument("--model")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_recover)

    p = sub.add_parser("eval", parents=[common], help="resolution and contrast metrics")
    p.add_argument("--lines", required=True)
    p.add_argument("--reference", help="reference lines for NRMSE")
    p.add_argument("--out", required=True, help="metrics CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", parents=[common], help="write a B-mode image")
    p.add_argument("--lines", required=True)
    p.add_argument("--out", required=True, help=".pgm or .png")
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--dynamic-range", type=float, default=60.0)
    p.add_argument("--height", type=int, default=512)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("bench", parents=[common], help="time network inference against matrix ISTA")
    p.add_argument("--sizes", default="480,960,1920,3840")
    p.add_argument("--layers", type=int, default=30)
    p.add_argument("--iterations", type=int, default=100)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--batch", type=int, default=16, help="lines per timed call")
    p.add_argument("--out", help="timings CSV")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CliError, io.ContainerError, lista.ModelFileError, lista.ShapeError,
            AcquisitionError, FileNotFoundError, ValueError) as exc:
        print(f"subnyq {args.verb}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
