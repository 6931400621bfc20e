"""On-disk formats: NIKT trajectories, NIKD datasets, NIKM checkpoints,
PGM frames, raw volumes and CSV tables.

All binary formats are little-endian and start with a four-byte magic
followed by a ``u32`` format version.
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .metrics import MetricReport
from .model import FourierFeatureEncoder, ModelConfig, NikModel
from .phantom import SampledDataset
from .trajectory import CoordinateBounds, TrajectorySpec, denormalize_coordinates
from .training import AdamState

VERSION = 1


class FormatError(ValueError):
    """A file has the wrong magic, version or layout."""


def _check_header(buf: bytes, magic: bytes, path) -> int:
    if len(buf) < 8 or buf[:4] != magic:
        raise FormatError(f"{path}: bad magic, expected {magic.decode()!r}")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported {magic.decode()} version {version}")
    return 8


# -- trajectory ------------------------------------------------------------

_SPOKE = np.dtype([("angle", "<f8"), ("timestamp", "<f8"), ("phase", "<f8")])


def write_trajectory(path, traj: TrajectorySpec, phases) -> None:
    header = b"NIKT" + struct.pack(
        "<IQIddd", VERSION, traj.n_spokes, traj.n_samples_per_spoke, traj.angle_increment_deg, traj.tr_ms, traj.kmax
    )
    rec = np.empty(traj.n_spokes, dtype=_SPOKE)
    rec["angle"] = traj.spoke_angles_deg
    rec["timestamp"] = traj.timestamps_ms
    rec["phase"] = phases
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(rec.tobytes())


def read_trajectory(path):
    """Returns ``(TrajectorySpec, phases)``."""
    buf = Path(path).read_bytes()
    off = _check_header(buf, b"NIKT", path)
    n_spokes, n_samples, inc, tr, kmax = struct.unpack_from("<QIddd", buf, off)
    off += struct.calcsize("<QIddd")
    rec = np.frombuffer(buf, dtype=_SPOKE, count=n_spokes, offset=off)
    if off + rec.nbytes != len(buf):
        raise FormatError(f"{path}: trailing or missing spoke records")
    traj = TrajectorySpec(
        n_spokes=int(n_spokes),
        n_samples_per_spoke=int(n_samples),
        angle_increment_deg=inc,
        tr_ms=tr,
        kmax=kmax,
        spoke_angles_deg=rec["angle"].copy(),
        timestamps_ms=rec["timestamp"].copy(),
    )
    return traj, rec["phase"].copy()


def write_trajectory_csv(path, traj: TrajectorySpec, phases) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "angle_deg", "timestamp_ms", "phase"])
        for i in range(traj.n_spokes):
            w.writerow([i, repr(float(traj.spoke_angles_deg[i])), repr(float(traj.timestamps_ms[i])), repr(float(phases[i]))])


# -- sampled dataset ---------------------------------------------------------

_POINT = np.dtype(
    [("t", "<f4"), ("kx", "<f4"), ("ky", "<f4"), ("c", "<f4"), ("re", "<f4"), ("im", "<f4")]
)


def write_key_values(path, items: dict) -> None:
    with open(path, "w") as fh:
        for key, value in items.items():
            fh.write(f"{key}={value}\n")


def read_key_values(path) -> dict:
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise FormatError(f"{path}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def dataset_sidecar(path) -> Path:
    return Path(str(path) + ".txt")


def write_dataset(path, ds: SampledDataset, extra: dict | None = None) -> None:
    """Point records in NIKD format plus a ``key=value`` sidecar."""
    rec = np.empty(len(ds), dtype=_POINT)
    rec["t"] = ds.raw[:, 0]
    rec["kx"] = ds.coords[:, 1]
    rec["ky"] = ds.coords[:, 2]
    rec["c"] = ds.coords[:, 3]
    rec["re"] = ds.values.real
    rec["im"] = ds.values.imag
    with open(path, "wb") as fh:
        fh.write(b"NIKD" + struct.pack("<IQI", VERSION, len(ds), ds.n_coils))
        fh.write(rec.tobytes())
    side = {
        "n_spokes": ds.n_spokes,
        "n_samples_per_spoke": ds.n_samples_per_spoke,
        "kspace_scale": repr(ds.kspace_scale),
        "phantom_hash": ds.phantom_hash,
    }
    for axis, lo, hi in zip("t kx ky c".split(), ds.bounds.mins, ds.bounds.maxs):
        side[f"bounds.{axis}.min"] = repr(float(lo))
        side[f"bounds.{axis}.max"] = repr(float(hi))
    side.update(extra or {})
    write_key_values(dataset_sidecar(path), side)


def read_dataset(path) -> SampledDataset:
    buf = Path(path).read_bytes()
    off = _check_header(buf, b"NIKD", path)
    count, n_coils = struct.unpack_from("<QI", buf, off)
    off += struct.calcsize("<QI")
    if len(buf) - off != count * _POINT.itemsize:
        raise FormatError(f"{path}: expected {count} point records")
    rec = np.frombuffer(buf, dtype=_POINT, count=count, offset=off)
    side = read_key_values(dataset_sidecar(path))
    bounds = CoordinateBounds(
        mins=tuple(float(side[f"bounds.{a}.min"]) for a in "t kx ky c".split()),
        maxs=tuple(float(side[f"bounds.{a}.max"]) for a in "t kx ky c".split()),
    )
    n_spokes = int(side["n_spokes"])
    n_samples = int(side["n_samples_per_spoke"])
    if n_spokes * n_samples * n_coils != count:
        raise FormatError(f"{path}: point count does not match the sidecar layout")
    phase = rec["t"].astype(float)
    lo, hi = bounds.as_arrays()
    t_norm = 2.0 * (phase - lo[0]) / (hi[0] - lo[0]) - 1.0
    coords = np.stack([t_norm, rec["kx"], rec["ky"], rec["c"]], axis=1).astype(float)
    raw = denormalize_coordinates(coords, bounds)
    raw[:, 0] = phase
    raw[:, 3] = np.rint(raw[:, 3])
    return SampledDataset(
        coords=coords,
        raw=raw,
        values=rec["re"].astype(float) + 1j * rec["im"].astype(float),
        n_coils=int(n_coils),
        n_spokes=n_spokes,
        n_samples_per_spoke=n_samples,
        bounds=bounds,
        phases=phase[: n_spokes * n_samples : n_samples].copy(),
        kspace_scale=float(side["kspace_scale"]),
        phantom_hash=side.get("phantom_hash", ""),
    )


# -- checkpoints -------------------------------------------------------------

_PRECISION_CODES = {"float64": 0, "float32": 1}
_CONFIG = "<IIIdd4ddQI"


def write_checkpoint(path, model: NikModel, state: AdamState | None = None) -> None:
    """Model (and optionally optimiser) state in NIKM format.

    Every array is stored as f64 so float32 models round-trip exactly.
    """
    cfg = model.config
    parts = [
        b"NIKM",
        struct.pack(
            "<I" + _CONFIG[1:],
            VERSION,
            cfg.depth,
            cfg.width,
            cfg.n_features,
            cfg.omega0,
            cfg.omega_hidden,
            *cfg.feature_scale,
            cfg.output_scale,
            cfg.encoder_seed,
            _PRECISION_CODES[cfg.precision],
        ),
        np.ascontiguousarray(model.encoder.B, dtype="<f8").tobytes(),
    ]
    for p in model.parameters():
        parts.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
    if state is None:
        parts.append(struct.pack("<I", 0))
    else:
        parts.append(struct.pack("<IQdddd", 1, state.step, state.lr, state.beta1, state.beta2, state.eps))
        for arr in state.m + state.v:
            parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_checkpoint(path):
    """Returns ``(NikModel, AdamState or None)``; shapes are validated."""
    buf = Path(path).read_bytes()
    off = _check_header(buf, b"NIKM", path)
    try:
        fields = struct.unpack_from(_CONFIG, buf, off)
    except struct.error as exc:
        raise FormatError(f"{path}: truncated config block") from exc
    off += struct.calcsize(_CONFIG)
    depth, width, m, w0, wh = fields[:5]
    scale = fields[5:9]
    out_scale, enc_seed, prec_code = fields[9:]
    precision = {v: k for k, v in _PRECISION_CODES.items()}.get(prec_code)
    if precision is None:
        raise FormatError(f"{path}: unknown precision code {prec_code}")
    cfg = ModelConfig(
        depth=depth, width=width, n_features=m, omega0=w0, omega_hidden=wh,
        feature_scale=scale, encoder_seed=enc_seed, precision=precision, output_scale=out_scale,
    )

    def take(shape):
        nonlocal off
        n = int(np.prod(shape))
        if off + 8 * n > len(buf):
            raise FormatError(f"{path}: truncated array data (shapes disagree with config)")
        arr = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shape).copy()
        off += 8 * n
        return arr

    B = take((m, 4))
    dims = [2 * m] + [width] * (depth - 1) + [2]
    shapes = []
    for layer in range(depth):
        shapes += [(dims[layer + 1], dims[layer]), (dims[layer + 1],)]
    params = [take(s).astype(cfg.dtype) for s in shapes]
    encoder = FourierFeatureEncoder(B=B, scale=np.asarray(scale, dtype=float))
    model = NikModel(cfg, encoder, params[0::2], params[1::2])

    if off + 4 > len(buf):
        raise FormatError(f"{path}: missing optimiser flag")
    (has_state,) = struct.unpack_from("<I", buf, off)
    off += 4
    state = None
    if has_state:
        step, lr, b1, b2, eps = struct.unpack_from("<Qdddd", buf, off)
        off += struct.calcsize("<Qdddd")
        moments = [take(s).astype(cfg.dtype) for s in shapes + shapes]
        state = AdamState(moments[: len(shapes)], moments[len(shapes) :], int(step), lr, b1, b2, eps)
    if off != len(buf):
        raise FormatError(f"{path}: {len(buf) - off} trailing bytes")
    return model, state


# -- tables ------------------------------------------------------------------


def write_loss_history(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "data_term", "reg_term", "total"])
        for step, data, reg, total in history:
            w.writerow([step, repr(float(data)), repr(float(reg)), repr(float(total))])


def read_loss_history(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [(int(r["step"]), float(r["data_term"]), float(r["reg_term"]), float(r["total"])) for r in rows]


def write_metric_report(path, report: MetricReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["phase", "nrmse", "psnr_db", "ssim"])
        for i in range(report.n_phases):
            w.writerow([i, repr(float(report.nrmse[i])), repr(float(report.psnr[i])), repr(float(report.ssim[i]))])
        s = report.summary()
        w.writerow(["mean"] + [repr(s[k][0]) for k in ("nrmse", "psnr", "ssim")])
        w.writerow(["std"] + [repr(s[k][1]) for k in ("nrmse", "psnr", "ssim")])


def read_metric_report(path):
    """Returns ``(per-phase rows, summary dict)``."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    per_phase = [r for r in rows if r["phase"] not in ("mean", "std")]
    summary = {r["phase"]: r for r in rows if r["phase"] in ("mean", "std")}
    return per_phase, summary


# -- images --------------------------------------------------------------------


def write_pgm16(path, image, scale: float) -> None:
    """16-bit binary PGM; pixel = round(value / scale), clipped to 65535."""
    img = np.asarray(image, dtype=float)
    q = np.clip(np.rint(img / scale), 0, 65535).astype(">u2")
    h, w = q.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode())
        fh.write(q.tobytes())


def read_pgm16(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while buf[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not buf[pos : pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    pos += 1
    dtype = ">u2" if maxval > 255 else "u1"
    return np.frombuffer(buf, dtype=dtype, count=w * h, offset=pos).reshape(h, w).astype(np.int64)


def write_volume(path, volume, meta: dict | None = None) -> None:
    """Raw little-endian f32 volume plus a JSON sidecar with shape and metadata."""
    vol = np.ascontiguousarray(volume, dtype="<f4")
    Path(path).write_bytes(vol.tobytes())
    side = {"shape": list(vol.shape), "dtype": "float32", "byte_order": "little"}
    side.update(meta or {})
    Path(str(path) + ".json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")


def read_volume(path):
    """Returns ``(array, sidecar dict)``."""
    side = json.loads(Path(str(path) + ".json").read_text())
    shape = tuple(side["shape"])
    buf = Path(path).read_bytes()
    if len(buf) != 4 * int(np.prod(shape)):
        raise FormatError(f"{path}: size does not match sidecar shape {shape}")
    return np.frombuffer(buf, dtype="<f4").reshape(shape).astype(float), side


def write_frames(directory, frames, stem: str = "frame", meta: dict | None = None) -> float:
    """One PGM per phase plus ``<stem>s.f32``; returns the PGM scale factor."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    frames = np.asarray(frames, dtype=float)
    peak = float(frames.max()) if frames.size else 0.0
    scale = peak / 65535.0 if peak > 0 else 1.0
    for i, frame in enumerate(frames):
        write_pgm16(directory / f"{stem}_{i:03d}.pgm", frame, scale)
    info = {"pgm_scale": scale}
    info.update(meta or {})
    write_volume(directory / f"{stem}s.f32", frames, info)
    return scale


def write_kspace_dump(path, kspace, bounds: CoordinateBounds, grid) -> None:
    """Cartesian k-space as NIKD point records (raw phase, normalised k and coil)."""
    coords = grid.coordinates()
    raw_t = grid.raw_coordinates()[:, 0]
    vals = np.asarray(kspace).ravel()
    rec = np.empty(len(vals), dtype=_POINT)
    rec["t"] = raw_t
    rec["kx"] = coords[:, 1]
    rec["ky"] = coords[:, 2]
    rec["c"] = coords[:, 3]
    rec["re"] = vals.real
    rec["im"] = vals.imag
    with open(path, "wb") as fh:
        fh.write(b"NIKD" + struct.pack("<IQI", VERSION, len(vals), grid.n_coils))
        fh.write(rec.tobytes())
