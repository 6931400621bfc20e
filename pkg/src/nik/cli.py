"""Command-line pipeline: ``nik simulate|train|reconstruct|evaluate|compare``."""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import formats
from .config import ConfigError, ExperimentConfig, dump_config, load_config
from .metrics import evaluate_frames
from .model import init_model
from .phantom import (
    analytic_kspace,
    coil_sensitivities,
    default_phantom,
    load_phantom_config,
    phantom_from_config,
    rasterize,
    simulate_acquisition,
)
from .reconstruction import (
    CartesianQueryGrid,
    reconstruct_binned_baseline,
    reconstruct_nik,
    xt_profile,
)
from .training import train
from .trajectory import CoordinateBounds, generate_radial_trajectory, heartbeat_index, map_to_cardiac_phase

logger = logging.getLogger("nik")


class CliError(RuntimeError):
    """Expected failure reported as a one-line message and exit code 1."""


# -- plumbing ----------------------------------------------------------------


@contextlib.contextmanager
def output_lock(directory: Path):
    """Exclusive lockfile so two commands never write one directory."""
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / ".nik.lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CliError(f"{directory} is locked by another run (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


@contextlib.contextmanager
def thread_limit():
    """Cap BLAS/OpenMP workers at ``NIK_THREADS`` when it is set."""
    value = os.environ.get("NIK_THREADS")
    if not value:
        yield
        return
    try:
        n = int(value)
    except ValueError:
        raise CliError(f"NIK_THREADS must be a positive integer, got {value!r}") from None
    if n < 1:
        raise CliError(f"NIK_THREADS must be a positive integer, got {value!r}")
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(directory: Path, command: str, cfg: ExperimentConfig | None, extra: dict | None = None) -> dict:
    """``manifest.json``: config, seeds and output hashes.

    ``content_hash`` covers everything except the wall-clock ``created`` field.
    """
    files = {}
    for path in sorted(directory.rglob("*")):
        if path.is_file() and path.name not in ("manifest.json", ".nik.lock"):
            files[str(path.relative_to(directory))] = file_digest(path)
    body = {"command": command, "files": files}
    if cfg is not None:
        body["config"] = dump_config(cfg, include_out=False)
        body["seeds"] = {k: str(v) for k, v in cfg.seeds().items()}
    body.update(extra or {})
    content_hash = hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()
    manifest = dict(body, content_hash=content_hash, created=time.strftime("%Y-%m-%dT%H:%M:%S%z"))
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _config_from_args(args) -> ExperimentConfig:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        overrides["out"] = args.out
    for flag, key in (("phases", "recon.phases"), ("grid", "recon.grid"), ("heartbeats", "timing.heartbeats"), ("steps", "train.steps")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    return load_config(args.config, overrides)


def _bounds_items(bounds: CoordinateBounds) -> dict:
    items = {}
    for axis, lo, hi in zip("t kx ky c".split(), bounds.mins, bounds.maxs):
        items[f"bounds.{axis}.min"] = repr(float(lo))
        items[f"bounds.{axis}.max"] = repr(float(hi))
    return items


def _bounds_from_items(items: dict, source) -> CoordinateBounds:
    try:
        return CoordinateBounds(
            mins=tuple(float(items[f"bounds.{a}.min"]) for a in "t kx ky c".split()),
            maxs=tuple(float(items[f"bounds.{a}.max"]) for a in "t kx ky c".split()),
        )
    except KeyError as exc:
        raise CliError(f"{source}: missing {exc.args[0]}") from None


# -- simulate ----------------------------------------------------------------


def build_phantom(cfg: ExperimentConfig):
    if cfg.phantom_path:
        ph = phantom_from_config(load_phantom_config(cfg.phantom_path), n_coils=cfg.n_coils)
    else:
        ph = default_phantom(n_coils=cfg.n_coils)
    return ph.static() if cfg.static else ph


def simulate(cfg: ExperimentConfig):
    """Phantom, trajectory (after the heartbeat budget) and dataset for ``cfg``."""
    seeds = cfg.seeds()
    ph = build_phantom(cfg)
    traj = generate_radial_trajectory(cfg.n_spokes, cfg.n_samples_per_spoke, cfg.angle_increment_deg, cfg.tr_ms)
    timing = cfg.timing
    if cfg.heartbeats:
        beats = heartbeat_index(traj.timestamps_ms, timing, seeds["phantom-noise"])
        n_keep = int(np.count_nonzero(beats < cfg.heartbeats))
        if n_keep == 0:
            raise CliError("heartbeat budget selects no spokes")
        traj = traj.head(n_keep)
    scale = float(traj.matrix_size) ** 2
    noise = cfg.noise_std
    if cfg.noise_rel_dc:
        phases = map_to_cardiac_phase(traj.timestamps_ms, timing, seeds["phantom-noise"])
        dc = max(np.abs(analytic_kspace(ph, c, np.zeros_like(phases), np.zeros_like(phases), phases)).max() for c in range(ph.n_coils))
        noise = cfg.noise_rel_dc * scale * float(dc)
    ds = simulate_acquisition(ph, traj, timing, noise_std=noise, seed=seeds["phantom-noise"], kspace_scale=scale)
    return ph, traj, ds, noise


def ground_truth_frames(ph, grid_size: int, n_phases: int) -> np.ndarray:
    centers = (np.arange(n_phases) + 0.5) / n_phases
    return np.stack([np.abs(rasterize(ph, None, grid_size, t)) for t in centers])


def write_sensitivities(directory: Path, ph, grid_size: int) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for c, s in enumerate(coil_sensitivities(ph, grid_size)):
        formats.write_volume(directory / f"coil_{c:02d}.f32", np.stack([s.real, s.imag]), {"coil": c, "layout": "re,im"})


def read_sensitivities(directory: Path) -> np.ndarray:
    files = sorted(Path(directory).glob("coil_*.f32"))
    if not files:
        raise CliError(f"no sensitivity files in {directory}")
    maps = []
    for f in files:
        vol, _ = formats.read_volume(f)
        maps.append(vol[0] + 1j * vol[1])
    return np.stack(maps)


def cmd_simulate(cfg: ExperimentConfig, out: Path) -> dict:
    ph, traj, ds, noise = simulate(cfg)
    out.mkdir(parents=True, exist_ok=True)
    formats.write_dataset(out / "dataset.nikd", ds, {"noise_std": repr(noise)})
    formats.write_trajectory(out / "trajectory.nikt", traj, ds.phases)
    formats.write_trajectory_csv(out / "trajectory.csv", traj, ds.phases)
    formats.write_frames(out / "ground_truth", ground_truth_frames(ph, cfg.grid, cfg.phases))
    write_sensitivities(out / "sensitivities", ph, cfg.grid)
    (out / "config.txt").write_text(dump_config(cfg, include_out=False))
    return write_manifest(out, "simulate", cfg, {"phantom_hash": ph.config_hash(), "n_points": len(ds), "n_spokes": traj.n_spokes})


# -- train ---------------------------------------------------------------------


def _load_dataset(path: Path):
    if not path.is_file():
        raise CliError(f"dataset {path} does not exist")
    return formats.read_dataset(path)


def cmd_train(cfg: ExperimentConfig, data: Path, out: Path, resume: Path | None = None) -> dict:
    ds = _load_dataset(data)
    train_cfg = cfg.resolved_train()
    history = []
    if resume is not None:
        model, state = formats.read_checkpoint(resume)
        if state is None:
            raise CliError(f"{resume} has no optimiser state to resume from")
        loss_csv = Path(resume).with_name("loss.csv")
        if loss_csv.is_file():
            history = [row for row in formats.read_loss_history(loss_csv) if row[0] < state.step]
        remaining = train_cfg.steps - state.step
        if remaining < 1:
            raise CliError(f"checkpoint is already at step {state.step} of {train_cfg.steps}")
        train_cfg = replace(train_cfg, steps=remaining)
    else:
        model, state = init_model(cfg.seeds()["model-init"], cfg.resolved_model()), None
    result = train(ds.coords, ds.values, model, train_cfg, state=state)
    out.mkdir(parents=True, exist_ok=True)
    formats.write_checkpoint(out / "checkpoint.nikm", result.model, result.state)
    side = _bounds_items(ds.bounds)
    side.update(n_coils=ds.n_coils, encoder_digest=result.model.encoder.digest())
    formats.write_key_values(out / "checkpoint.nikm.txt", side)
    formats.write_loss_history(out / "loss.csv", history + result.history)
    return write_manifest(out, "train", cfg, {"dataset_sha256": file_digest(data), "final_step": result.state.step})


# -- reconstruct ---------------------------------------------------------------


def load_trained(checkpoint: Path):
    if not checkpoint.is_file():
        raise CliError(f"checkpoint {checkpoint} does not exist")
    model, _ = formats.read_checkpoint(checkpoint)
    side_path = Path(str(checkpoint) + ".txt")
    if not side_path.is_file():
        raise CliError(f"checkpoint sidecar {side_path} is missing")
    side = formats.read_key_values(side_path)
    return model, _bounds_from_items(side, side_path), int(side["n_coils"])


def write_recon(out: Path, recon, grid: CartesianQueryGrid, xt_row: int | None, dump_kspace: bool, bounds) -> None:
    formats.write_frames(out / "frames", recon.combined, meta={"n_phases": grid.n_phases, "grid_size": grid.grid_size})
    if xt_row is not None:
        strip = xt_profile(recon.combined, xt_row)
        formats.write_volume(out / "xt_profile.f32", strip, {"row": xt_row})
        formats.write_pgm16(out / "xt_profile.pgm", strip, max(float(strip.max()), 1e-30) / 65535.0)
    if dump_kspace:
        formats.write_kspace_dump(out / "kspace.nikd", recon.kspace, bounds, grid)


def cmd_reconstruct(checkpoint: Path, grid_size: int, n_phases: int, out: Path, sensitivities: Path | None = None,
                    xt_row: int | None = None, dump_kspace: bool = False) -> dict:
    model, bounds, n_coils = load_trained(checkpoint)
    grid = CartesianQueryGrid(grid_size, n_phases, n_coils, bounds)
    maps = None
    if sensitivities is not None:
        maps = read_sensitivities(sensitivities)
        if maps.shape != (n_coils, grid_size, grid_size):
            raise CliError(f"sensitivity maps have shape {maps.shape}, need {(n_coils, grid_size, grid_size)}")
    recon = reconstruct_nik(model, grid, maps)
    out.mkdir(parents=True, exist_ok=True)
    write_recon(out, recon, grid, xt_row, dump_kspace, bounds)
    return write_manifest(out, "reconstruct", None, {"checkpoint_sha256": file_digest(checkpoint), "grid": grid_size, "phases": n_phases})


# -- evaluate --------------------------------------------------------------------


def _frames(directory: Path) -> np.ndarray:
    path = Path(directory) / "frames.f32"
    if not path.is_file():
        path = Path(directory) / "frames" / "frames.f32"
    if not path.is_file():
        raise CliError(f"no frames.f32 volume under {directory}")
    return formats.read_volume(path)[0]


def cmd_evaluate(recon_dir: Path, truth_dir: Path, out_csv: Path):
    recon, truth = _frames(recon_dir), _frames(truth_dir)
    if recon.shape != truth.shape:
        raise CliError(f"frame stacks differ: reconstruction {recon.shape} vs ground truth {truth.shape}")
    report = evaluate_frames(recon, truth)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    formats.write_metric_report(out_csv, report)
    return report


# -- compare ---------------------------------------------------------------------


def cmd_compare(cfg: ExperimentConfig, out: Path) -> dict:
    """Simulate once, then NIK and binned gridding against the same reference."""
    sim, trained = out / "simulate", out / "train"
    cmd_simulate(cfg, sim)
    cmd_train(cfg, sim / "dataset.nikd", trained)
    maps = sim / "sensitivities" if cfg.use_sensitivities else None
    row = cfg.grid // 2 if cfg.xt_row is None else cfg.xt_row
    cmd_reconstruct(trained / "checkpoint.nikm", cfg.grid, cfg.phases, out / "nik", maps, xt_row=row)

    ds = formats.read_dataset(sim / "dataset.nikd")
    traj, _ = formats.read_trajectory(sim / "trajectory.nikt")
    sens = read_sensitivities(maps) if maps is not None else None
    base = reconstruct_binned_baseline(ds, traj, cfg.phases, cfg.gridding, grid_size=cfg.grid, sensitivities=sens)
    grid = CartesianQueryGrid(cfg.grid, cfg.phases, ds.n_coils, ds.bounds)
    write_recon(out / "baseline", base, grid, row, False, ds.bounds)

    truth = _frames(sim / "ground_truth")
    rows = {}
    for method in ("nik", "baseline"):
        report = cmd_evaluate(out / method, sim / "ground_truth", out / f"metrics_{method}.csv")
        rows[method] = report.summary()
        diff = np.abs(_frames(out / method) - truth)
        formats.write_frames(out / method / "difference", diff, stem="diff")
    with open(out / "compare.csv", "w") as fh:
        fh.write("method,nrmse_mean,nrmse_std,psnr_mean,psnr_std,ssim_mean,ssim_std,reference\n")
        for method, s in rows.items():
            vals = [repr(float(x)) for key in ("nrmse", "psnr", "ssim") for x in s[key]]
            fh.write(",".join([method, *vals, "ground_truth/frames.f32"]) + "\n")
    return write_manifest(out, "compare", cfg)


# -- entry point -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nik", description="Neural implicit k-space reconstruction pipeline.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=False):
        sp.add_argument("--config", type=Path, help="key=value experiment config")
        sp.add_argument("--seed", type=int, help="global seed (u64)")
        sp.add_argument("--out", type=Path, required=out_required, help="output directory")

    sp = sub.add_parser("simulate", help="simulate a radial acquisition and ground truth")
    common(sp)
    sp.add_argument("--phases", type=int)
    sp.add_argument("--grid", type=int)
    sp.add_argument("--heartbeats", type=int, help="keep spokes of the first N heartbeats (0 = all)")

    sp = sub.add_parser("train", help="fit the network to a simulated dataset")
    common(sp)
    sp.add_argument("--data", type=Path, required=True, help="NIKD dataset")
    sp.add_argument("--resume", type=Path, help="checkpoint to continue from")
    sp.add_argument("--steps", type=int, help="total step count")

    sp = sub.add_parser("reconstruct", help="query a trained network on a Cartesian grid")
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--grid", type=int, default=64)
    sp.add_argument("--phases", type=int, default=30)
    sp.add_argument("--sensitivities", type=Path, help="directory of coil_XX.f32 maps")
    sp.add_argument("--xt-row", type=int)
    sp.add_argument("--dump-kspace", action="store_true")

    sp = sub.add_parser("evaluate", help="metrics of reconstructed frames against ground truth")
    sp.add_argument("--recon", type=Path, required=True)
    sp.add_argument("--truth", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True, help="metric CSV path")

    sp = sub.add_parser("compare", help="NIK against the binned gridding baseline")
    common(sp)
    sp.add_argument("--phases", type=int)
    sp.add_argument("--grid", type=int)
    sp.add_argument("--heartbeats", type=int)
    sp.add_argument("--steps", type=int)
    return p


def run(args) -> None:
    with thread_limit():
        if args.command == "evaluate":
            report = cmd_evaluate(args.recon, args.truth, args.out)
            print(report)
            return
        if args.command == "reconstruct":
            out = args.out
            with output_lock(out):
                cmd_reconstruct(args.checkpoint, args.grid, args.phases, out, args.sensitivities, args.xt_row, args.dump_kspace)
            return
        cfg = _config_from_args(args)
        out = Path(cfg.out)
        with output_lock(out):
            if args.command == "simulate":
                cmd_simulate(cfg, out)
            elif args.command == "train":
                cmd_train(cfg, args.data, out, args.resume)
            else:
                cmd_compare(cfg, out)
                print((out / "compare.csv").read_text(), end="")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except (CliError, ConfigError, formats.FormatError, FileNotFoundError, FloatingPointError, ValueError) as exc:
        print(f"nik {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
