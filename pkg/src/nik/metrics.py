"""Image-quality metrics on magnitude images: NRMSE, PSNR and SSIM."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

#: Reported PSNR when the two images are identical.
PSNR_CAP_DB = 200.0


def _real_pair(x, ref):
    x = np.asarray(x)
    ref = np.asarray(ref)
    if np.iscomplexobj(x) or np.iscomplexobj(ref):
        raise TypeError("metrics take magnitude images; pass np.abs(...) explicitly")
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {ref.shape}")
    return x.astype(float), ref.astype(float)


def nrmse(x, ref) -> float:
    x, ref = _real_pair(x, ref)
    denom = np.linalg.norm(ref)
    if denom == 0:
        raise ValueError("reference image is zero")
    return float(np.linalg.norm(x - ref) / denom)


def psnr(x, ref) -> float:
    """``10 log10(max(ref)^2 / MSE)``, capped at :data:`PSNR_CAP_DB`."""
    x, ref = _real_pair(x, ref)
    peak = ref.max()
    if not np.any(ref):
        raise ValueError("reference image is zero")
    mse = np.mean((x - ref) ** 2)
    if mse == 0:
        return PSNR_CAP_DB
    return float(min(10.0 * np.log10(peak**2 / mse), PSNR_CAP_DB))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _blur(img, window):
    out = ndimage.correlate1d(img, window, axis=0, mode="mirror")
    return ndimage.correlate1d(out, window, axis=1, mode="mirror")


def ssim_map(x, ref, data_range=None, k1=0.01, k2=0.03, size=11, sigma=1.5):
    x, ref = _real_pair(x, ref)
    if x.ndim != 2 or min(x.shape) < 8:
        raise ValueError("ssim needs 2-D images of at least 8x8")
    L = float(ref.max() - ref.min()) if data_range is None else float(data_range)
    if L <= 0:
        raise ValueError("zero dynamic range")
    c1 = (k1 * L) ** 2
    c2 = (k2 * L) ** 2
    w = gaussian_window(size, sigma)
    mu_x = _blur(x, w)
    mu_r = _blur(ref, w)
    sxx = _blur(x * x, w) - mu_x**2
    srr = _blur(ref * ref, w) - mu_r**2
    sxr = _blur(x * ref, w) - mu_x * mu_r
    num = (2 * mu_x * mu_r + c1) * (2 * sxr + c2)
    den = (mu_x**2 + mu_r**2 + c1) * (sxx + srr + c2)
    return num / den


def ssim(x, ref, data_range=None) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03.

    The dynamic range defaults to ``max(ref) - min(ref)``; pass
    ``data_range`` to fix it (needed for flat references).
    """
    return float(ssim_map(x, ref, data_range).mean())


@dataclass
class MetricReport:
    nrmse: np.ndarray
    psnr: np.ndarray
    ssim: np.ndarray

    @property
    def n_phases(self) -> int:
        return len(self.nrmse)

    def summary(self) -> dict:
        out = {}
        for name in ("nrmse", "psnr", "ssim"):
            vals = getattr(self, name)
            out[name] = (float(np.mean(vals)), float(np.std(vals)))
        return out

    def __str__(self):
        s = self.summary()
        return (
            f"NRMSE {s['nrmse'][0]:.4f}+-{s['nrmse'][1]:.4f}  "
            f"PSNR {s['psnr'][0]:.2f}+-{s['psnr'][1]:.2f} dB  "
            f"SSIM {s['ssim'][0]:.4f}+-{s['ssim'][1]:.4f}"
        )


def evaluate_frames(frames, references) -> MetricReport:
    """Per-phase metrics of ``[phase][y][x]`` magnitude stacks."""
    frames = np.asarray(frames)
    references = np.asarray(references)
    if frames.shape != references.shape:
        raise ValueError(f"frame stack {frames.shape} does not match reference stack {references.shape}")
    return MetricReport(
        nrmse=np.array([nrmse(f, r) for f, r in zip(frames, references)]),
        psnr=np.array([psnr(f, r) for f, r in zip(frames, references)]),
        ssim=np.array([ssim(f, r) for f, r in zip(frames, references)]),
    )
