"""Radial tiny-golden-angle trajectories, ECG phase mapping and spoke binning."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

#: 7th tiny golden angle, 180 / (6 + golden ratio), in degrees.
TINY_GOLDEN_ANGLE_DEG = 180.0 / (6.0 + (1.0 + np.sqrt(5.0)) / 2.0)

#: Order of the coordinate axes in every (t, kx, ky, c) array.
COORD_AXES = ("t", "kx", "ky", "c")


@dataclass(frozen=True)
class TrajectorySpec:
    """Geometry and timing of a 2-D radial acquisition.

    ``kmax`` is the maximum readout radius in cycles per field of view; the
    matching Cartesian matrix is ``2 * kmax``.
    """

    n_spokes: int
    n_samples_per_spoke: int
    angle_increment_deg: float
    tr_ms: float
    kmax: float
    spoke_angles_deg: np.ndarray = field(repr=False)
    timestamps_ms: np.ndarray = field(repr=False)

    @property
    def matrix_size(self) -> int:
        return int(round(2 * self.kmax))

    @property
    def radial_step(self) -> float:
        return 2.0 * self.kmax / self.n_samples_per_spoke

    def radii(self) -> np.ndarray:
        """Signed readout radii, one sample exactly at 0."""
        n = self.n_samples_per_spoke
        return (np.arange(n) - n // 2) * self.radial_step

    def kspace_locations(self) -> np.ndarray:
        """Raw (kx, ky) of every sample, shape ``(n_spokes, n_samples, 2)``."""
        theta = np.deg2rad(self.spoke_angles_deg)[:, None]
        r = self.radii()[None, :]
        return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=-1)

    def head(self, n_spokes: int) -> "TrajectorySpec":
        """The first ``n_spokes`` spokes, which is again a valid trajectory."""
        if not 1 <= n_spokes <= self.n_spokes:
            raise ValueError(f"cannot take {n_spokes} of {self.n_spokes} spokes")
        return TrajectorySpec(
            n_spokes=n_spokes,
            n_samples_per_spoke=self.n_samples_per_spoke,
            angle_increment_deg=self.angle_increment_deg,
            tr_ms=self.tr_ms,
            kmax=self.kmax,
            spoke_angles_deg=self.spoke_angles_deg[:n_spokes].copy(),
            timestamps_ms=self.timestamps_ms[:n_spokes].copy(),
        )


@dataclass(frozen=True)
class CardiacTiming:
    rr_interval_ms: float = 1000.0
    n_heartbeats_used: int = 1
    rr_jitter_std_ms: float = 0.0

    def __post_init__(self):
        if not self.rr_interval_ms > 0:
            raise ValueError("rr_interval_ms must be positive")
        if self.n_heartbeats_used < 1:
            raise ValueError("n_heartbeats_used must be >= 1")
        if self.rr_jitter_std_ms < 0:
            raise ValueError("rr_jitter_std_ms must be >= 0")


@dataclass(frozen=True)
class CoordinateBounds:
    """Per-axis raw ``[min, max]`` for the affine map onto ``[-1, 1]``."""

    mins: tuple
    maxs: tuple

    def __post_init__(self):
        if len(self.mins) != 4 or len(self.maxs) != 4:
            raise ValueError("bounds need one (min, max) per axis t, kx, ky, c")
        for name, lo, hi in zip(COORD_AXES, self.mins, self.maxs):
            if hi < lo:
                raise ValueError(f"bounds for {name}: max < min")

    @classmethod
    def for_acquisition(cls, kmax: float, n_coils: int) -> "CoordinateBounds":
        """Phase in [0, 1], k symmetric about the centre, coils 0..C-1.

        Fixed (not data-derived) so that k-space centre maps to 0 exactly.
        """
        return cls(
            mins=(0.0, -float(kmax), -float(kmax), 0.0),
            maxs=(1.0, float(kmax), float(kmax), float(n_coils - 1)),
        )

    def as_arrays(self):
        return np.asarray(self.mins, dtype=float), np.asarray(self.maxs, dtype=float)


def _check_count(name, value, minimum=1):
    if int(value) != value or value < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value!r}")


def generate_radial_trajectory(
    n_spokes: int,
    n_samples_per_spoke: int,
    angle_increment_deg: float = TINY_GOLDEN_ANGLE_DEG,
    tr_ms: float = 2.3,
    kmax: float | None = None,
) -> TrajectorySpec:
    """Build a radial trajectory with a constant angular increment.

    Parameters
    ----------
    n_spokes
        Number of spokes, acquired one per TR.
    n_samples_per_spoke
        Readout points per spoke. Must be even so one sample hits k = 0.
    angle_increment_deg
        Angle between consecutive spokes. Defaults to the 7th tiny golden
        angle (~23.628 deg).
    tr_ms
        Repetition time; spoke ``i`` is stamped at ``i * tr_ms``.
    kmax
        Readout radius in cycles/FOV. Defaults to ``n_samples_per_spoke / 4``,
        i.e. two-fold readout oversampling.
    """
    _check_count("n_spokes", n_spokes)
    _check_count("n_samples_per_spoke", n_samples_per_spoke, 2)
    if n_samples_per_spoke % 2:
        raise ValueError("n_samples_per_spoke must be even (asymmetric readouts unsupported)")
    if not 0.0 < angle_increment_deg < 180.0:
        raise ValueError("angle_increment_deg must lie in (0, 180)")
    if not tr_ms > 0:
        raise ValueError("tr_ms must be positive")
    if kmax is None:
        kmax = n_samples_per_spoke / 4.0
    if not kmax > 0:
        raise ValueError("kmax must be positive")

    index = np.arange(int(n_spokes), dtype=float)
    angles = np.mod(index * angle_increment_deg, 180.0)
    timestamps = index * tr_ms
    return TrajectorySpec(
        n_spokes=int(n_spokes),
        n_samples_per_spoke=int(n_samples_per_spoke),
        angle_increment_deg=float(angle_increment_deg),
        tr_ms=float(tr_ms),
        kmax=float(kmax),
        spoke_angles_deg=angles,
        timestamps_ms=timestamps,
    )


def beat_boundaries(t_end_ms: float, timing: CardiacTiming, seed: int = 0) -> np.ndarray:
    """Start times of consecutive heartbeats, covering ``[0, t_end_ms]``.

    The last entry is the end of the final beat.
    """
    rr = timing.rr_interval_ms
    if timing.rr_jitter_std_ms == 0:
        n = int(np.floor(t_end_ms / rr)) + 2
        return np.arange(n, dtype=float) * rr
    rng = np.random.default_rng(seed)
    lengths = []
    total = 0.0
    while total <= t_end_ms:
        length = rr + rng.normal(0.0, timing.rr_jitter_std_ms)
        if length <= 0:
            raise ValueError(f"jittered beat {len(lengths)} has non-positive length {length:.3f} ms")
        lengths.append(length)
        total += length
    return np.concatenate([[0.0], np.cumsum(lengths)])


def map_to_cardiac_phase(timestamps_ms, timing: CardiacTiming, seed: int = 0) -> np.ndarray:
    """Relative position of each timestamp within its heartbeat, in [0, 1)."""
    t = np.asarray(timestamps_ms, dtype=float)
    if t.size and t.min() < 0:
        raise ValueError("timestamps must be non-negative")
    rr = timing.rr_interval_ms
    if timing.rr_jitter_std_ms == 0:
        phase = np.mod(t, rr) / rr
    else:
        starts = beat_boundaries(float(t.max(initial=0.0)), timing, seed)
        beat = np.searchsorted(starts, t, side="right") - 1
        phase = (t - starts[beat]) / (starts[beat + 1] - starts[beat])
    # (rr - ulp) / rr can round to 1.0
    return np.minimum(phase, np.nextafter(1.0, 0.0))


def heartbeat_index(timestamps_ms, timing: CardiacTiming, seed: int = 0) -> np.ndarray:
    """Zero-based index of the heartbeat containing each timestamp."""
    t = np.asarray(timestamps_ms, dtype=float)
    starts = beat_boundaries(float(t.max(initial=0.0)), timing, seed)
    return np.searchsorted(starts, t, side="right") - 1


def normalize_coordinates(raw_points, bounds: CoordinateBounds) -> np.ndarray:
    """Affine map of raw ``(t_phase, kx, ky, coil)`` rows onto ``[-1, 1]^4``.

    Axes whose bounds collapse to a single value map to 0.
    """
    raw = np.asarray(raw_points, dtype=float)
    if raw.ndim != 2 or raw.shape[1] != 4:
        raise ValueError(f"expected an (n, 4) array, got shape {raw.shape}")
    lo, hi = bounds.as_arrays()
    tol = 1e-12 * np.maximum(1.0, np.maximum(np.abs(lo), np.abs(hi)))
    bad = (raw < lo - tol) | (raw > hi + tol)
    if bad.any():
        idx, dim = np.argwhere(bad)[0]
        raise ValueError(
            f"raw value {raw[idx, dim]!r} at index {idx} outside bounds "
            f"[{lo[dim]}, {hi[dim]}] on axis {COORD_AXES[dim]}"
        )
    span = hi - lo
    degenerate = span == 0
    out = 2.0 * (raw - lo) / np.where(degenerate, 1.0, span) - 1.0
    out[:, degenerate] = 0.0
    return out


def denormalize_coordinates(points, bounds: CoordinateBounds) -> np.ndarray:
    """Inverse of :func:`normalize_coordinates` (degenerate axes return min)."""
    v = np.asarray(points, dtype=float)
    lo, hi = bounds.as_arrays()
    return lo + (v + 1.0) * (hi - lo) / 2.0


def bin_spokes(phases, n_phases: int) -> np.ndarray:
    """Assign each spoke to bin ``floor(phase * n_phases)``."""
    _check_count("n_phases", n_phases)
    p = np.asarray(phases, dtype=float)
    if p.size and (p.min() < 0 or p.max() >= 1):
        raise ValueError("phases must lie in [0, 1)")
    return np.minimum(np.floor(p * n_phases).astype(np.int64), n_phases - 1)
