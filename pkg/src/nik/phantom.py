"""Dynamic multi-coil ellipse phantom with closed-form k-space.

Image coordinates are fractions of the field of view, ``x, y`` in
``[-0.5, 0.5)``. k-space coordinates are in cycles per FOV, and the
transform convention is ``F(k) = integral f(x) exp(-2 pi i k.x) dx``.
Coil sensitivities are finite sums of plane waves, so by the modulation
theorem every coil's k-space is a weighted sum of shifted ellipse
transforms and stays analytic.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from importlib import resources

import numpy as np
from scipy import special

from .trajectory import (
    CardiacTiming,
    CoordinateBounds,
    TrajectorySpec,
    map_to_cardiac_phase,
    normalize_coordinates,
)


@dataclass(frozen=True)
class DynamicEllipse:
    center: tuple = (0.0, 0.0)
    axes: tuple = (0.25, 0.25)
    rotation: float = 0.0
    intensity: complex = 1.0
    pulsation: float = 0.0
    pulsation_phase: float = 0.0

    def __post_init__(self):
        if min(self.axes) <= 0:
            raise ValueError("ellipse semi-axes must be positive")
        if not 0 <= self.pulsation < 1:
            raise ValueError("pulsation must lie in [0, 1) to keep the axes positive")

    def axes_at(self, t):
        """Semi-axes ``(a(t), b(t))``; ``t`` may be an array."""
        scale = 1.0 + self.pulsation * np.sin(2 * np.pi * np.asarray(t, dtype=float) + self.pulsation_phase)
        return self.axes[0] * scale, self.axes[1] * scale


@dataclass(frozen=True)
class PlaneWaveCoil:
    """Sensitivity ``sum_j w_j exp(2 pi i (u_j x + v_j y))``."""

    terms: tuple = ((1.0 + 0j, (0.0, 0.0)),)

    def __post_init__(self):
        if not self.terms:
            raise ValueError("a coil needs at least one plane-wave term")
        for _, (u, v) in self.terms:
            if abs(u) > 3 or abs(v) > 3:
                raise ValueError("coil plane-wave frequencies must satisfy |u|, |v| <= 3 cycles/FOV")

    def sensitivity(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        out = np.zeros(np.broadcast(x, y).shape, dtype=complex)
        for w, (u, v) in self.terms:
            out += w * np.exp(2j * np.pi * (u * x + v * y))
        return out


UNIT_COIL = PlaneWaveCoil()


@dataclass(frozen=True)
class DynamicPhantom:
    ellipses: tuple
    coils: tuple = (UNIT_COIL,)
    fov_samples_hint: int = 256
    config: dict = field(default=None, compare=False, repr=False)

    @property
    def n_coils(self) -> int:
        return len(self.coils)

    def static(self) -> "DynamicPhantom":
        """Same phantom with all pulsation switched off."""
        return replace(self, ellipses=tuple(replace(e, pulsation=0.0) for e in self.ellipses))

    def with_coils(self, coils) -> "DynamicPhantom":
        return replace(self, coils=tuple(coils))

    def config_hash(self) -> str:
        """SHA-256 over a canonical description of every parameter."""
        desc = {
            "ellipses": [
                [list(e.center), list(e.axes), e.rotation, [complex(e.intensity).real, complex(e.intensity).imag],
                 e.pulsation, e.pulsation_phase]
                for e in self.ellipses
            ],
            "coils": [
                [[complex(w).real, complex(w).imag, u, v] for w, (u, v) in c.terms] for c in self.coils
            ],
        }
        blob = json.dumps(desc, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def default_coils(n_coils: int, dc_weight=1.0, wave_weight=0.5, wave_frequency=0.7):
    """Two-term coils: a DC term plus one plane wave whose direction rotates
    with the coil index. Normalised so sum over coils of |S|^2 is 1 at the
    FOV centre."""
    raw = []
    for c in range(n_coils):
        angle = 2 * np.pi * c / n_coils
        u, v = wave_frequency * np.cos(angle), wave_frequency * np.sin(angle)
        w0 = dc_weight * np.exp(1j * 0.5 * angle)
        w1 = wave_weight * np.exp(1j * angle)
        raw.append((w0, w1, (u, v)))
    norm = np.sqrt(sum(abs(w0 + w1) ** 2 for w0, w1, _ in raw))
    return tuple(
        PlaneWaveCoil(terms=((complex(w0 / norm), (0.0, 0.0)), (complex(w1 / norm), (float(u), float(v)))))
        for w0, w1, (u, v) in raw
    )


def phantom_from_config(cfg: dict, n_coils: int | None = None) -> DynamicPhantom:
    ellipses = tuple(
        DynamicEllipse(
            center=tuple(e["center"]),
            axes=tuple(e["axes"]),
            rotation=float(e["rotation"]),
            intensity=complex(*e["intensity"]),
            pulsation=float(e["pulsation"]),
            pulsation_phase=float(e["pulsation_phase"]),
        )
        for e in cfg["ellipses"]
    )
    coil_cfg = dict(cfg.get("coils", {}))
    count = int(n_coils if n_coils is not None else coil_cfg.pop("n_coils", 1))
    coil_cfg.pop("n_coils", None)
    coils = default_coils(count, **coil_cfg) if count > 1 else (UNIT_COIL,)
    return DynamicPhantom(
        ellipses=ellipses, coils=coils, fov_samples_hint=int(cfg.get("fov_samples_hint", 256)), config=cfg
    )


def load_phantom_config(path=None) -> dict:
    """Read a phantom JSON file; ``None`` loads the bundled default."""
    if path is None:
        text = resources.files("nik").joinpath("data/phantom_v1.json").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    cfg = json.loads(text)
    if cfg.get("version") != 1:
        raise ValueError(f"unsupported phantom config version {cfg.get('version')!r}")
    return cfg


def default_phantom(n_coils: int | None = None) -> DynamicPhantom:
    return phantom_from_config(load_phantom_config(), n_coils=n_coils)


def bessel_j1(x):
    """Bessel function of the first kind, order 1."""
    return special.j1(x)


def ellipse_kspace(ellipse: DynamicEllipse, kx, ky, t=0.0):
    """Closed-form transform of one ellipse at ``(kx, ky)`` and phase ``t``."""
    kx = np.asarray(kx, dtype=float)
    ky = np.asarray(ky, dtype=float)
    a, b = ellipse.axes_at(t)
    cos, sin = np.cos(ellipse.rotation), np.sin(ellipse.rotation)
    kxr = kx * cos + ky * sin
    kyr = -kx * sin + ky * cos
    r = np.hypot(a * kxr, b * kyr)
    # J1(2 pi r) / r -> pi as r -> 0; below 1e-6 the two-term series is exact to double precision
    small = r < 1e-6
    r_safe = np.where(small, 1.0, r)
    j1_over_r = np.where(small, np.pi * (1.0 - 0.5 * (np.pi * r) ** 2), bessel_j1(2 * np.pi * r_safe) / r_safe)
    x0, y0 = ellipse.center
    shift = np.exp(-2j * np.pi * (kx * x0 + ky * y0))
    return ellipse.intensity * a * b * j1_over_r * shift


def analytic_kspace(phantom: DynamicPhantom, coil_index: int, kx, ky, t=0.0):
    """k-space of coil ``coil_index`` in cycles/FOV; arguments broadcast."""
    coil = phantom.coils[coil_index]
    kx = np.asarray(kx, dtype=float)
    ky = np.asarray(ky, dtype=float)
    out = np.zeros(np.broadcast(kx, ky, np.asarray(t)).shape, dtype=complex)
    for w, (u, v) in coil.terms:
        for e in phantom.ellipses:
            out += w * ellipse_kspace(e, kx - u, ky - v, t)
    return out


def pixel_centers(grid_size: int) -> np.ndarray:
    """FOV coordinates of pixel centres under the centred-FFT convention."""
    return (np.arange(grid_size) - grid_size // 2) / grid_size


def cartesian_kspace(phantom: DynamicPhantom, coil_index: int, grid_size: int, t=0.0):
    """Cartesian k-space at integer cycles/FOV, DC at index ``N // 2``.

    Scaled by ``N**2`` so that ``ifft2c`` returns the image in intensity
    units on the ``rasterize`` pixel grid.
    """
    k = np.arange(grid_size) - grid_size // 2
    ky, kx = np.meshgrid(k, k, indexing="ij")
    return grid_size**2 * analytic_kspace(phantom, coil_index, kx, ky, t)


def _inside(e: DynamicEllipse, x, y, t):
    a, b = e.axes_at(t)
    cos, sin = np.cos(e.rotation), np.sin(e.rotation)
    dx, dy = x - e.center[0], y - e.center[1]
    xr = dx * cos + dy * sin
    yr = -dx * sin + dy * cos
    return (xr / a) ** 2 + (yr / b) ** 2 <= 1.0


def rasterize(phantom: DynamicPhantom, coil_index: int | None, grid_size: int, t=0.0, supersample: int = 4):
    """Box-averaged image of one coil (``coil_index=None``: no sensitivity).

    Rows are ``y`` and columns ``x``; each pixel is the mean over a
    ``supersample x supersample`` lattice of sub-points.
    """
    if grid_size < 8:
        raise ValueError("grid_size must be >= 8")
    if supersample < 1:
        raise ValueError("supersample must be >= 1")
    offsets = ((np.arange(supersample) + 0.5) / supersample - 0.5) / grid_size
    centers = pixel_centers(grid_size)
    fine = (centers[:, None] + offsets[None, :]).ravel()
    y, x = np.meshgrid(fine, fine, indexing="ij")
    img = np.zeros(x.shape, dtype=complex)
    for e in phantom.ellipses:
        img += e.intensity * _inside(e, x, y, t)
    if coil_index is not None:
        img *= phantom.coils[coil_index].sensitivity(x, y)
    s = supersample
    return img.reshape(grid_size, s, grid_size, s).mean(axis=(1, 3))


def coil_sensitivities(phantom: DynamicPhantom, grid_size: int) -> np.ndarray:
    """Ground-truth sensitivity maps at pixel centres, ``[coil][y][x]``."""
    c = pixel_centers(grid_size)
    y, x = np.meshgrid(c, c, indexing="ij")
    return np.stack([coil.sensitivity(x, y) for coil in phantom.coils])


@dataclass
class SampledDataset:
    """Flat table of acquired samples.

    Points are ordered coil-major, then spoke, then readout sample.
    ``coords`` are normalised ``(t, kx, ky, c)``; ``raw`` holds the same
    coordinates before normalisation (cardiac phase, cycles/FOV, coil index).
    """

    coords: np.ndarray
    raw: np.ndarray
    values: np.ndarray
    n_coils: int
    n_spokes: int
    n_samples_per_spoke: int
    bounds: CoordinateBounds
    phases: np.ndarray
    kspace_scale: float = 1.0
    phantom_hash: str = ""

    def __len__(self):
        return len(self.values)

    @property
    def coil_index(self) -> np.ndarray:
        return np.rint(self.raw[:, 3]).astype(np.int64)

    @property
    def spoke_index(self) -> np.ndarray:
        per_coil = np.repeat(np.arange(self.n_spokes), self.n_samples_per_spoke)
        return np.tile(per_coil, self.n_coils)

    def select(self, mask) -> "SampledDataset":
        """Row subset; spoke/coil bookkeeping is no longer implied by order."""
        mask = np.asarray(mask)
        return replace(self, coords=self.coords[mask], raw=self.raw[mask], values=self.values[mask])


def n_points(traj: TrajectorySpec, n_coils: int) -> int:
    return traj.n_spokes * traj.n_samples_per_spoke * n_coils


def simulate_acquisition(
    phantom: DynamicPhantom,
    traj: TrajectorySpec,
    timing: CardiacTiming,
    noise_std: float = 0.0,
    seed: int = 0,
    kspace_scale: float | None = None,
    chunk: int = 1 << 18,
) -> SampledDataset:
    """Sample every coil along every spoke at the spoke's cardiac phase.

    Values are ``kspace_scale * analytic_kspace`` (default scale is the
    nominal matrix squared, matching :func:`cartesian_kspace`) plus
    i.i.d. complex Gaussian noise with ``noise_std`` per real/imag part.
    Noise comes from a counter-based Philox stream keyed on ``seed``.
    """
    if not np.isfinite(noise_std) or noise_std < 0:
        raise ValueError("noise_std must be finite and >= 0")
    if kspace_scale is None:
        kspace_scale = float(traj.matrix_size) ** 2
    phases = map_to_cardiac_phase(traj.timestamps_ms, timing, seed)
    kxy = traj.kspace_locations().reshape(-1, 2)
    spoke_phase = np.repeat(phases, traj.n_samples_per_spoke)
    n_per_coil = kxy.shape[0]
    C = phantom.n_coils

    raw = np.empty((C * n_per_coil, 4))
    values = np.empty(C * n_per_coil, dtype=complex)
    for c in range(C):
        sl = slice(c * n_per_coil, (c + 1) * n_per_coil)
        raw[sl, 0] = spoke_phase
        raw[sl, 1:3] = kxy
        raw[sl, 3] = c
        for start in range(0, n_per_coil, chunk):
            stop = min(start + chunk, n_per_coil)
            values[sl.start + start : sl.start + stop] = analytic_kspace(
                phantom, c, kxy[start:stop, 0], kxy[start:stop, 1], spoke_phase[start:stop]
            )
    values *= kspace_scale
    if noise_std > 0:
        rng = np.random.Generator(np.random.Philox(key=int(seed)))
        noise = rng.standard_normal((values.size, 2))
        values += noise_std * (noise[:, 0] + 1j * noise[:, 1])

    bounds = CoordinateBounds.for_acquisition(traj.kmax, C)
    return SampledDataset(
        coords=normalize_coordinates(raw, bounds),
        raw=raw,
        values=values,
        n_coils=C,
        n_spokes=traj.n_spokes,
        n_samples_per_spoke=traj.n_samples_per_spoke,
        bounds=bounds,
        phases=phases,
        kspace_scale=float(kspace_scale),
        phantom_hash=phantom.config_hash(),
    )
