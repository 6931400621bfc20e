"""Cartesian inference from a trained network, and the binned gridding baseline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from .model import NikModel, forward_batch
from .phantom import SampledDataset
from .trajectory import CoordinateBounds, TrajectorySpec, bin_spokes, normalize_coordinates


def fft2c(x):
    """Centred forward 2-D DFT over the last two axes (no normalisation)."""
    x = np.asarray(x)
    return np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(x, axes=(-2, -1))), axes=(-2, -1))


def ifft2c(kspace):
    """Centred inverse 2-D DFT over the last two axes, scaled by ``1/N^2``.

    DC sits at index ``N // 2`` on both axes, in k-space and image space.
    """
    k = np.asarray(kspace)
    if min(k.shape[-2:]) < 2:
        raise ValueError("ifft2c needs at least a 2x2 grid")
    return np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(k, axes=(-2, -1))), axes=(-2, -1))


@dataclass(frozen=True)
class CartesianQueryGrid:
    grid_size: int
    n_phases: int
    n_coils: int
    bounds: CoordinateBounds

    def __post_init__(self):
        if self.grid_size < 2 or self.n_phases < 1 or self.n_coils < 1:
            raise ValueError("grid_size >= 2, n_phases >= 1 and n_coils >= 1 required")

    @classmethod
    def for_dataset(cls, dataset: SampledDataset, grid_size: int, n_phases: int) -> "CartesianQueryGrid":
        return cls(grid_size, n_phases, dataset.n_coils, dataset.bounds)

    def phase_centers(self) -> np.ndarray:
        return (np.arange(self.n_phases) + 0.5) / self.n_phases

    def raw_coordinates(self) -> np.ndarray:
        """Raw ``(t, kx, ky, c)`` of every grid point in ``[phase][coil][ky][kx]`` order."""
        N = self.grid_size
        kmax = self.bounds.maxs[1]
        k = (np.arange(N) - N // 2) * (2.0 * kmax / N)
        t, c, ky, kx = np.meshgrid(self.phase_centers(), np.arange(self.n_coils, dtype=float), k, k, indexing="ij")
        return np.stack([t.ravel(), kx.ravel(), ky.ravel(), c.ravel()], axis=1)

    def coordinates(self) -> np.ndarray:
        return normalize_coordinates(self.raw_coordinates(), self.bounds)

    @property
    def shape(self):
        return (self.n_phases, self.n_coils, self.grid_size, self.grid_size)


@dataclass
class ReconResult:
    kspace: np.ndarray  # [phase][coil][ky][kx]
    coil_images: np.ndarray  # [phase][coil][y][x]
    combined: np.ndarray  # [phase][y][x], magnitude


def infer_kspace(model: NikModel, grid: CartesianQueryGrid, chunk: int = 16384) -> np.ndarray:
    coords = grid.coordinates()
    out = np.empty(len(coords), dtype=complex)
    for start in range(0, len(coords), chunk):
        out[start : start + chunk] = forward_batch(model, coords[start : start + chunk])
    return out.reshape(grid.shape)


def coil_combine(coil_images, sensitivities=None, threshold: float = 1e-8) -> np.ndarray:
    """Root-sum-of-squares, or sensitivity-weighted combination when maps are given.

    Works on ``[coil][y][x]`` or a leading phase axis ``[phase][coil][y][x]``.
    """
    x = np.asarray(coil_images)
    if sensitivities is None:
        return np.sqrt(np.sum(np.abs(x) ** 2, axis=-3))
    S = np.asarray(sensitivities)
    if S.shape != x.shape[-3:]:
        raise ValueError(f"sensitivity shape {S.shape} does not match coil images {x.shape[-3:]}")
    power = np.sum(np.abs(S) ** 2, axis=0)
    valid = power >= threshold
    if not valid.any():
        raise ValueError("sensitivity maps are zero everywhere")
    num = np.sum(np.conj(S) * x, axis=-3)
    return np.where(valid, np.abs(num) / np.where(valid, power, 1.0), 0.0)


def radial_dcf(radii, n_spokes: int, kmax: float) -> np.ndarray:
    """Ramp weights for one spoke, normalised over ``n_spokes`` spokes.

    Weights are ``|r|`` except at k = 0, where every spoke repeats the same
    sample: there the ramp value a quarter step out makes the spokes
    together cover exactly the central disc of radius ``step / 2``. Weights
    of all spokes sum to ``pi * kmax**2``, the k-space area they cover in
    Cartesian cells.
    """
    r = np.abs(np.asarray(radii, dtype=float))
    step = np.min(np.diff(np.sort(np.asarray(radii, dtype=float))))
    w = np.where(r == 0, step / 4.0, r)
    return w * (np.pi * kmax**2 / (n_spokes * w.sum()))


def density_compensation_radial(traj: TrajectorySpec) -> np.ndarray:
    """Per-sample weights, shape ``(n_spokes, n_samples_per_spoke)``."""
    w = radial_dcf(traj.radii(), traj.n_spokes, traj.kmax)
    return np.broadcast_to(w, (traj.n_spokes, traj.n_samples_per_spoke)).copy()


@dataclass(frozen=True)
class GriddingConfig:
    oversampling: float = 2.0
    width: int = 4
    beta: float | None = None
    deapodize: bool = True

    def __post_init__(self):
        if self.oversampling < 1:
            raise ValueError("oversampling must be >= 1")
        if self.width < 2:
            raise ValueError("kernel width must be >= 2")

    @property
    def kernel_beta(self) -> float:
        """Beatty et al. shape parameter for the width/oversampling pair."""
        if self.beta is not None:
            return float(self.beta)
        W, a = self.width, self.oversampling
        return float(np.pi * np.sqrt(max((W / a) ** 2 * (a - 0.5) ** 2 - 0.8, 0.0)))


def kaiser_bessel(d, width: float, beta: float):
    d = np.asarray(d, dtype=float)
    arg = 1.0 - (2.0 * d / width) ** 2
    return np.where(arg >= 0, special.i0(beta * np.sqrt(np.clip(arg, 0, None))), 0.0)


def kaiser_bessel_ft(f, width: float, beta: float):
    """Continuous Fourier transform of :func:`kaiser_bessel` at ``f`` cycles/cell."""
    z2 = beta**2 - (np.pi * width * np.asarray(f, dtype=float)) ** 2
    z = np.sqrt(np.abs(z2))
    safe = np.where(z == 0, 1.0, z)
    ratio = np.where(z2 > 0, np.sinh(safe) / safe, np.sin(safe) / safe)
    return width * np.where(z == 0, 1.0, ratio)


def adjoint_gridding(kxy, values, dcf, grid_size: int, cfg: GriddingConfig = GriddingConfig()) -> np.ndarray:
    """Density-compensated adjoint NUFFT onto an ``N x N`` image.

    ``kxy`` holds raw k-locations in cycles/FOV, so a unit spacing matches the
    Cartesian ``N x N`` grid. The result follows the ``ifft2c`` scaling.
    """
    kxy = np.asarray(kxy, dtype=float).reshape(-1, 2)
    data = np.asarray(values).ravel() * np.asarray(dcf).ravel()
    if len(data) != len(kxy):
        raise ValueError("kxy, values and dcf must have matching lengths")
    if len(data) == 0:
        raise ValueError("no samples to grid")
    N = int(grid_size)
    G = 2 * int(np.ceil(cfg.oversampling * N / 2))
    alpha = G / N
    W = cfg.width
    beta = cfg.kernel_beta

    u = kxy * alpha + G // 2  # k-location in oversampled-grid cells
    base = np.floor(u - W / 2).astype(np.int64) + 1
    grid_re = np.zeros(G * G)
    grid_im = np.zeros(G * G)
    for ox in range(W):
        gx = base[:, 0] + ox
        wx = kaiser_bessel(u[:, 0] - gx, W, beta)
        for oy in range(W):
            gy = base[:, 1] + oy
            wgt = wx * kaiser_bessel(u[:, 1] - gy, W, beta)
            flat = np.mod(gy, G) * G + np.mod(gx, G)
            grid_re += np.bincount(flat, weights=wgt * data.real, minlength=G * G)
            grid_im += np.bincount(flat, weights=wgt * data.imag, minlength=G * G)
    grid = (grid_re + 1j * grid_im).reshape(G, G)

    img = ifft2c(grid) * (G * G) / (N * N)
    lo = G // 2 - N // 2
    img = img[lo : lo + N, lo : lo + N]
    if cfg.deapodize:
        f = (np.arange(N) - N // 2) / G
        apod = kaiser_bessel_ft(f, W, beta)
        img = img / (apod[:, None] * apod[None, :])
    return img


def reconstruct_nik(model: NikModel, grid: CartesianQueryGrid, sensitivities=None) -> ReconResult:
    kspace = infer_kspace(model, grid)
    coil_images = ifft2c(kspace)
    combined = np.stack([coil_combine(frame, sensitivities) for frame in coil_images])
    return ReconResult(kspace, coil_images, combined)


def reconstruct_binned_baseline(
    dataset: SampledDataset,
    traj: TrajectorySpec,
    n_phases: int,
    cfg: GriddingConfig = GriddingConfig(),
    grid_size: int | None = None,
    sensitivities=None,
) -> ReconResult:
    """Bin spokes by cardiac phase and grid each bin independently."""
    N = traj.matrix_size if grid_size is None else int(grid_size)
    if dataset.n_spokes != traj.n_spokes or len(dataset) != dataset.n_coils * traj.n_spokes * traj.n_samples_per_spoke:
        raise ValueError("dataset does not match the trajectory layout")
    bins = bin_spokes(dataset.phases, n_phases)
    kxy = traj.kspace_locations()  # (spokes, samples, 2)
    values = dataset.values.reshape(dataset.n_coils, traj.n_spokes, traj.n_samples_per_spoke)
    coil_images = np.empty((n_phases, dataset.n_coils, N, N), dtype=complex)
    for b in range(n_phases):
        spokes = np.flatnonzero(bins == b)
        if spokes.size == 0:
            raise ValueError(f"cardiac phase bin {b} contains no spokes")
        dcf = radial_dcf(traj.radii(), spokes.size, traj.kmax)
        dcf = np.broadcast_to(dcf, (spokes.size, traj.n_samples_per_spoke))
        for c in range(dataset.n_coils):
            coil_images[b, c] = adjoint_gridding(kxy[spokes], values[c, spokes], dcf, N, cfg)
    kspace = fft2c(coil_images)
    combined = np.stack([coil_combine(frame, sensitivities) for frame in coil_images])
    return ReconResult(kspace, coil_images, combined)


def xt_profile(combined, row: int) -> np.ndarray:
    """Stack one image row across phases: ``[phase][x]``."""
    return np.asarray(combined)[:, row, :]
