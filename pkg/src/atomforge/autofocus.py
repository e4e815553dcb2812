"""Focus scoring: bilateral denoising, squared-Laplacian contrast and Z scans."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .core import ModelError


def _gauss_1d(sigma: float, radius: int) -> np.ndarray:
    x = np.arange(-radius, radius + 1)
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def bilateral_filter(image, sigma_space: float, sigma_range: float, truncate: float = 4.0):
    """Edge-preserving smoothing with spatial and range Gaussian weights.

    Written as I_p + sum_q w_pq (I_q - I_p) / sum_q w_pq so that flat regions
    come back bit-for-bit. Borders use half-sample symmetric padding and the
    kernel radius follows scipy.ndimage.gaussian_filter, so the large
    sigma_range limit equals that filter.
    """
    if sigma_space <= 0 or sigma_range <= 0:
        raise ModelError("sigmas must be > 0")
    img = np.asarray(image, dtype=float)
    radius = int(truncate * sigma_space + 0.5)
    g = _gauss_1d(sigma_space, radius)
    pad = np.pad(img, radius, mode="symmetric")
    h, w = img.shape
    num = np.zeros_like(img)
    den = np.zeros_like(img)
    inv = -0.5 / sigma_range**2
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            q = pad[radius + dy:radius + dy + h, radius + dx:radius + dx + w]
            d = q - img
            wt = g[dy + radius] * g[dx + radius] * np.exp(inv * d * d)
            num += wt * d
            den += wt
    return img + num / den


def laplacian(image) -> np.ndarray:
    """4-neighbour discrete Laplacian on interior pixels."""
    a = np.asarray(image)
    if a.ndim != 2 or min(a.shape) < 3:
        raise ModelError("image must be at least 3x3")
    if a.dtype.kind in "iub":
        a = a.astype(np.int64)
    c = a[1:-1, 1:-1]
    return (a[:-2, 1:-1] - c) + (a[2:, 1:-1] - c) + (a[1:-1, :-2] - c) + (a[1:-1, 2:] - c)


def laplacian_score(image) -> float:
    """Sum of squared Laplacian responses (boundary excluded)."""
    lap = laplacian(image)
    return float(np.sum(lap * lap))


def device_pattern(rng: np.random.Generator, shape=(48, 64), pitch: int = 8, width: int = 2,
                   level: float = 100.0, background: float = 10.0) -> np.ndarray:
    """Bright device stripes on a dim membrane, random lengths and offsets."""
    h, w = shape
    img = np.full(shape, background)
    off = int(rng.integers(0, pitch))
    for c in range(off, w - width, pitch):
        top = int(rng.integers(0, h // 4))
        bottom = int(rng.integers(3 * h // 4, h))
        img[top:bottom, c:c + width] = level * rng.uniform(0.7, 1.0)
    return img


@dataclass
class BlurStack:
    """Synthetic imager: Gaussian blur growing linearly with defocus."""
    pattern: np.ndarray
    z_focus: float  # um
    blur_per_um: float = 1.5  # pixels of sigma per um of defocus
    sigma0: float = 0.3
    photons: float | None = None  # scale for Poisson shot noise, None for noiseless
    seed: int = 0

    def __call__(self, z: float, rng: np.random.Generator | None = None) -> np.ndarray:
        sigma = self.sigma0 + self.blur_per_um * abs(z - self.z_focus)
        img = gaussian_filter(self.pattern, sigma, mode="reflect")
        if self.photons is not None:
            if rng is None:
                raise ModelError("noisy blur stack needs an rng")
            img = rng.poisson(img * self.photons / img.max()).astype(float)
        return img


@dataclass
class FocusScan:
    z_positions: np.ndarray
    scores: np.ndarray
    best_z: float
    target_fraction: float
    recommended_z: float
    side: str
    out_of_range: bool = False


def focus_scores(images, *, sigma_space: float = 1.0, sigma_range: float = 20.0,
                 subregion=None) -> np.ndarray:
    out = []
    for img in images:
        img = np.asarray(img, dtype=float)
        if subregion is not None:
            img = img[subregion]
        out.append(laplacian_score(bilateral_filter(img, sigma_space, sigma_range)))
    return np.array(out)


def scan_focus(z_list, images, target_fraction: float = 1.0, *, side: str = "below",
               sigma_space: float = 1.0, sigma_range: float = 20.0, subregion=None) -> FocusScan:
    """Score a Z stack and pick the target position.

    ``images`` is either a sequence aligned with ``z_list`` or a callable z ->
    image. best_z is the highest score (lowest z on ties). The recommended z
    lies on ``side`` ("below" or "above") of best_z where the score has fallen
    to target_fraction of the maximum, by linear interpolation between scan
    points; NaN if the scan never falls that low on that side.
    """
    if not 0 < target_fraction <= 1:
        raise ModelError("target_fraction must lie in (0, 1]")
    if side not in ("below", "above"):
        raise ModelError("side must be 'below' or 'above'")
    z = np.asarray(z_list, dtype=float)
    if z.size < 5:
        raise ModelError("need at least 5 z positions")
    imgs = [images(v) for v in z] if callable(images) else list(images)
    if len(imgs) != z.size:
        raise ModelError("one image per z position required")
    order = np.argsort(z, kind="stable")
    z = z[order]
    scores = focus_scores([imgs[i] for i in order], sigma_space=sigma_space,
                          sigma_range=sigma_range, subregion=subregion)
    if not np.all(np.isfinite(scores)):
        raise ModelError("non-finite focus score")
    ib = int(np.argmax(scores))  # first maximum -> lowest z on ties
    out_of_range = ib == 0 or ib == z.size - 1
    target = target_fraction * scores[ib]
    rec = float(z[ib]) if target_fraction == 1.0 else math.nan
    if target_fraction < 1.0:
        step = -1 if side == "below" else 1
        i = ib
        while 0 <= i + step < z.size:
            j = i + step
            if scores[j] <= target:
                f = (scores[i] - target) / (scores[i] - scores[j])
                rec = float(z[i] + f * (z[j] - z[i]))
                break
            i = j
    return FocusScan(z, scores, float(z[ib]), target_fraction, rec, side, out_of_range)


def total_variation(image) -> float:
    a = np.asarray(image, dtype=float)
    return float(np.abs(np.diff(a, axis=0)).sum() + np.abs(np.diff(a, axis=1)).sum())
