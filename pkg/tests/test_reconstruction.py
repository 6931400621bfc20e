import time

import numpy as np
import pytest
from scipy.integrate import trapezoid

from nik.metrics import nrmse
from nik.model import ModelConfig, forward, init_model
from nik.phantom import (
    UNIT_COIL,
    DynamicEllipse,
    DynamicPhantom,
    cartesian_kspace,
    coil_sensitivities,
    default_phantom,
    rasterize,
    simulate_acquisition,
)
from nik.reconstruction import (
    CartesianQueryGrid,
    GriddingConfig,
    adjoint_gridding,
    coil_combine,
    density_compensation_radial,
    fft2c,
    ifft2c,
    infer_kspace,
    kaiser_bessel,
    kaiser_bessel_ft,
    radial_dcf,
    reconstruct_binned_baseline,
    reconstruct_nik,
    xt_profile,
)
from nik.trajectory import CardiacTiming, CoordinateBounds, bin_spokes, generate_radial_trajectory


def naive_idft2c(k):
    """Centred inverse DFT by explicit double sum (O(N^4))."""
    N = k.shape[0]
    n = np.arange(N) - N // 2
    E = np.exp(2j * np.pi * np.outer(n, n) / N)
    return E @ k @ E.T / N**2


def test_ifft_impulse_is_flat():
    k = np.zeros((8, 8), dtype=complex)
    k[4, 4] = 1.0
    np.testing.assert_allclose(ifft2c(k), 1 / 64, atol=1e-17)


def test_fft_round_trip():
    x = np.random.default_rng(0).normal(size=(2, 16, 16)) + 1j
    np.testing.assert_allclose(fft2c(ifft2c(x)), x, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("N", [2, 7, 16])
def test_ifft_matches_naive_dft(N):
    rng = np.random.default_rng(N)
    k = rng.normal(size=(N, N)) + 1j * rng.normal(size=(N, N))
    np.testing.assert_allclose(ifft2c(k), naive_idft2c(k), rtol=0, atol=1e-10 * np.abs(k).max())


def test_parseval():
    rng = np.random.default_rng(1)
    k = rng.normal(size=(16, 16)) + 1j * rng.normal(size=(16, 16))
    x = naive_idft2c(k)
    assert np.sum(np.abs(k) ** 2) == pytest.approx(16**2 * np.sum(np.abs(x) ** 2), rel=1e-10)
    assert np.sum(np.abs(k) ** 2) == pytest.approx(16**2 * np.sum(np.abs(ifft2c(k)) ** 2), rel=1e-10)


def test_ifft_rejects_tiny():
    with pytest.raises(ValueError):
        ifft2c(np.ones((1, 1)))


# -- query grid / inference ---------------------------------------------------


def bounds(kmax=32.0, n_coils=1):
    return CoordinateBounds.for_acquisition(kmax, n_coils)


def test_query_grid_layout():
    g = CartesianQueryGrid(8, 3, 2, bounds(4.0, 2))
    v = g.coordinates()
    assert v.shape == (3 * 2 * 8 * 8, 4)
    np.testing.assert_allclose(np.unique(v[:, 1]), np.arange(-4, 4) / 4)
    assert 0.0 in v[:, 1]
    np.testing.assert_allclose(np.unique(v[:, 0]), 2 * g.phase_centers() - 1)
    np.testing.assert_array_equal(np.unique(v[:, 3]), [-1.0, 1.0])
    # DC lives at index N/2 of the k-space arrays
    raw = g.raw_coordinates().reshape(3, 2, 8, 8, 4)
    assert raw[0, 0, 4, 4, 1] == 0.0 and raw[0, 0, 4, 4, 2] == 0.0


def test_zero_model_gives_zero_kspace():
    m = init_model(0, ModelConfig(depth=2, width=8, n_features=4))
    m = m.with_parameters([np.zeros_like(p) for p in m.parameters()])
    res = reconstruct_nik(m, CartesianQueryGrid(8, 2, 1, bounds()))
    np.testing.assert_array_equal(res.kspace, 0)
    np.testing.assert_array_equal(res.combined, 0)


def test_grid_point_equals_direct_forward():
    m = init_model(3, ModelConfig(depth=3, width=16, n_features=8))
    g = CartesianQueryGrid(8, 2, 1, bounds())
    k = infer_kspace(m, g)
    v = g.coordinates()
    for i in (0, 17, 100):
        assert k.ravel()[i] == forward(m, v[i])


def test_inference_order_invariant():
    m = init_model(3, ModelConfig(depth=3, width=16, n_features=8))
    g = CartesianQueryGrid(8, 2, 1, bounds())
    a = infer_kspace(m, g, chunk=7)
    b = infer_kspace(m, g, chunk=4096)
    assert a.tobytes() == b.tobytes()


def test_phase_count_needs_no_retraining():
    m = init_model(3, ModelConfig(depth=3, width=16, n_features=8))
    r30 = reconstruct_nik(m, CartesianQueryGrid(8, 30, 1, bounds()))
    r50 = reconstruct_nik(m, CartesianQueryGrid(8, 50, 1, bounds()))
    assert r30.combined.shape == (30, 8, 8) and r50.combined.shape == (50, 8, 8)


def test_reconstruct_is_composition():
    m = init_model(4, ModelConfig(depth=3, width=16, n_features=8))
    g = CartesianQueryGrid(8, 3, 2, bounds(32.0, 2))
    res = reconstruct_nik(m, g)
    k = infer_kspace(m, g)
    imgs = ifft2c(k)
    assert res.kspace.tobytes() == k.tobytes()
    assert res.coil_images.tobytes() == imgs.tobytes()
    assert res.combined.tobytes() == np.stack([coil_combine(f) for f in imgs]).tobytes()
    assert (res.combined >= 0).all()


def test_nik_recon_runtime_budget():
    m = init_model(0, ModelConfig(depth=5, width=128, n_features=128))
    t0 = time.perf_counter()
    reconstruct_nik(m, CartesianQueryGrid(64, 30, 1, bounds()))
    assert time.perf_counter() - t0 < 60


# -- coil combination ----------------------------------------------------------


def test_rss_single_coil():
    x = np.random.default_rng(0).normal(size=(1, 8, 8)) * (1 + 1j)
    np.testing.assert_allclose(coil_combine(x), np.abs(x[0]))


def test_rss_two_identical_coils():
    x = np.random.default_rng(1).normal(size=(8, 8)) + 0.5j
    np.testing.assert_allclose(coil_combine(np.stack([x, x])), np.sqrt(2) * np.abs(x), rtol=1e-15)


def test_rss_phase_invariant():
    x = np.random.default_rng(2).normal(size=(3, 8, 8)) + 1j * np.random.default_rng(3).normal(size=(3, 8, 8))
    rotated = x * np.exp(1j * np.array([0.3, -2.0, 1.1]))[:, None, None]
    np.testing.assert_allclose(coil_combine(rotated), coil_combine(x), rtol=1e-13)


def test_sensitivity_combination_recovers_object():
    ph = default_phantom(n_coils=6).static()
    N = 64
    maps = coil_sensitivities(ph, N)
    coil_imgs = np.stack([rasterize(ph, c, N) for c in range(6)])
    combined = coil_combine(coil_imgs, maps)
    assert nrmse(combined, np.abs(rasterize(ph, None, N))) < 0.02


def test_zero_sensitivities_rejected():
    with pytest.raises(ValueError):
        coil_combine(np.ones((2, 4, 4)), np.zeros((2, 4, 4)))


def test_low_sensitivity_pixels_zeroed():
    S = np.ones((1, 4, 4), dtype=complex)
    S[0, 0, 0] = 1e-5
    out = coil_combine(np.ones((1, 4, 4)), S)
    assert out[0, 0] == 0.0 and out[1, 1] == 1.0


# -- density compensation and gridding -------------------------------------------


def test_dcf_ramp_properties():
    traj = generate_radial_trajectory(10, 32, kmax=16.0)
    w = radial_dcf(traj.radii(), traj.n_spokes, traj.kmax)
    assert np.argmax(w) == 0  # sample at -kmax
    np.testing.assert_allclose(w[1:], w[1:][::-1])  # +/- symmetry about r = 0
    assert w[16] > 0
    total = density_compensation_radial(traj).sum()
    assert total == pytest.approx(np.pi * 16.0**2, rel=1e-12)


def test_dcf_center_covers_central_disc():
    # n spokes share the centre sample; its ramp value step/4 makes n * w0 * step * pi / n
    # equal the disc of radius step/2
    r = generate_radial_trajectory(7, 16, kmax=8.0).radii()
    w = radial_dcf(r, 7, 8.0)
    step = r[1] - r[0]
    center, first_ring = w[8], w[9]
    assert center / first_ring == pytest.approx(0.25)
    assert (center / first_ring * step) * step * np.pi == pytest.approx(np.pi * (step / 2) ** 2)


def test_kaiser_bessel_transform_matches_quadrature():
    W, beta = 4.0, GriddingConfig().kernel_beta
    d = np.linspace(-W / 2, W / 2, 20001)
    k = kaiser_bessel(d, W, beta)
    for f in (0.0, 0.1, 0.3):
        numeric = trapezoid(k * np.cos(2 * np.pi * f * d), d)
        assert kaiser_bessel_ft(f, W, beta) == pytest.approx(numeric, rel=1e-6)


def test_gridding_zero_samples():
    kxy = np.random.default_rng(0).uniform(-8, 8, (50, 2))
    img = adjoint_gridding(kxy, np.zeros(50), np.ones(50), 16)
    np.testing.assert_array_equal(img, 0)


def test_gridding_linearity():
    rng = np.random.default_rng(1)
    kxy = rng.uniform(-16, 16, (300, 2))
    y1 = rng.normal(size=300) + 1j * rng.normal(size=300)
    y2 = rng.normal(size=300) + 1j * rng.normal(size=300)
    w = rng.uniform(0.1, 1, 300)
    a, b = 2.5, -0.75 + 1j
    lhs = adjoint_gridding(kxy, a * y1 + b * y2, w, 32)
    rhs = a * adjoint_gridding(kxy, y1, w, 32) + b * adjoint_gridding(kxy, y2, w, 32)
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-10 * np.abs(lhs).max())


def test_gridding_center_impulse_is_flat():
    img = adjoint_gridding(np.zeros((1, 2)), np.ones(1), np.ones(1), 64)
    mag = np.abs(img)
    assert mag.max() / mag.min() - 1 < 0.02
    assert mag.mean() == pytest.approx(1 / 64**2, rel=0.02)


def test_gridding_matches_cartesian_on_grid_points():
    # samples on the Cartesian lattice with unit weights reproduce ifft2c
    rng = np.random.default_rng(2)
    N = 16
    k = rng.normal(size=(N, N)) + 1j * rng.normal(size=(N, N))
    ky, kx = np.meshgrid(np.arange(N) - N // 2, np.arange(N) - N // 2, indexing="ij")
    kxy = np.stack([kx.ravel(), ky.ravel()], 1).astype(float)
    img = adjoint_gridding(kxy, k.ravel(), np.ones(N * N), N, GriddingConfig(oversampling=2, width=6))
    assert nrmse(np.abs(img), np.abs(ifft2c(k))) < 0.01


@pytest.fixture(scope="module")
def dense_static():
    ph = default_phantom().static().with_coils([UNIT_COIL])
    N = 128
    traj = generate_radial_trajectory(402, 4 * N, kmax=N / 2)  # 402 >= pi N / 2 spokes
    ds = simulate_acquisition(ph, traj, CardiacTiming(), kspace_scale=float(N**2))
    return ph, traj, ds, N


def test_dense_gridding_matches_analytic_cartesian(dense_static):
    ph, traj, ds, N = dense_static
    img = adjoint_gridding(traj.kspace_locations(), ds.values, density_compensation_radial(traj), N)
    ref = ifft2c(cartesian_kspace(ph, 0, N))
    assert np.linalg.norm(img - ref) / np.linalg.norm(ref) < 0.05


def test_single_bin_baseline_is_high_quality(dense_static):
    ph, traj, ds, N = dense_static
    res = reconstruct_binned_baseline(ds, traj, 1, grid_size=N)
    ref = np.abs(ifft2c(cartesian_kspace(ph, 0, N)))
    assert nrmse(res.combined[0], ref) < 0.05


def test_dcf_improves_disk_reconstruction():
    disk = DynamicPhantom(ellipses=(DynamicEllipse(axes=(0.3, 0.3)),), coils=(UNIT_COIL,))
    N = 64
    traj = generate_radial_trajectory(200, 2 * N)
    ds = simulate_acquisition(disk, traj, CardiacTiming())
    ref = np.abs(rasterize(disk, 0, N))
    kxy = traj.kspace_locations()
    with_dcf = np.abs(adjoint_gridding(kxy, ds.values, density_compensation_radial(traj), N))
    flat = np.full(ds.values.size, np.pi * (N / 2) ** 2 / ds.values.size)
    without = np.abs(adjoint_gridding(kxy, ds.values, flat, N))
    assert nrmse(with_dcf, ref) < nrmse(without, ref)


def test_baseline_bin_sizes_shrink_three_fifths():
    traj = generate_radial_trajectory(8960, 8)
    from nik.trajectory import map_to_cardiac_phase

    phases = map_to_cardiac_phase(traj.timestamps_ms, CardiacTiming(rr_interval_ms=1000.0))
    c30 = np.bincount(bin_spokes(phases, 30), minlength=30).mean()
    c50 = np.bincount(bin_spokes(phases, 50), minlength=50).mean()
    assert c50 / c30 == pytest.approx(3 / 5)


def test_baseline_empty_bin_names_bin():
    ph = default_phantom(n_coils=1)
    traj = generate_radial_trajectory(5, 16)
    ds = simulate_acquisition(ph, traj, CardiacTiming())
    with pytest.raises(ValueError, match="bin 1 "):
        reconstruct_binned_baseline(ds, traj, 10, grid_size=8)


def test_baseline_uses_sensitivities():
    ph = default_phantom(n_coils=3).static()
    traj = generate_radial_trajectory(300, 64)
    ds = simulate_acquisition(ph, traj, CardiacTiming())
    maps = coil_sensitivities(ph, 32)
    res = reconstruct_binned_baseline(ds, traj, 1, sensitivities=maps)
    assert res.combined.shape == (1, 32, 32)
    assert nrmse(res.combined[0], np.abs(rasterize(ph, None, 32))) < 0.15


def test_xt_profile():
    frames = np.arange(3 * 4 * 5, dtype=float).reshape(3, 4, 5)
    np.testing.assert_array_equal(xt_profile(frames, 2), frames[:, 2, :])


@pytest.mark.parametrize("kwargs", [dict(oversampling=0.5), dict(width=1)])
def test_invalid_gridding_config(kwargs):
    with pytest.raises(ValueError):
        GriddingConfig(**kwargs)
