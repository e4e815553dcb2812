"""Synthetic photon-count frames, ROI occupancy decoding and histogram fidelity.

Frames persist as little-endian raw pixel dumps plus a JSON sidecar. Integer
frames use uint16; averaged images use a float64 variant of the same layout.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import brentq
from scipy.stats import poisson

from .core import ImagingParams, AtomforgeError, ModelError


class FrameIOError(AtomforgeError):
    exit_code = 4


@dataclass
class Frame:
    counts: np.ndarray  # (height, width)
    exposure: float  # ms
    rois: dict  # site index -> (row, col) of the ROI's top-left pixel
    roi_size: int = 4
    seed: int | None = None
    _flat: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.counts = np.asarray(self.counts)
        if self.counts.ndim != 2:
            raise ModelError("frame counts must be 2-D")
        if np.any(self.counts < 0):
            raise ModelError("frame counts must be >= 0")
        if self.exposure <= 0:
            raise ModelError("exposure must be > 0")
        h, w = self.counts.shape
        s = self.roi_size
        taken = np.zeros((h, w), dtype=bool)
        for site, (r, c) in self.rois.items():
            if r < 0 or c < 0 or r + s > h or c + s > w:
                raise ModelError(f"ROI for site {site} lies outside the frame")
            if taken[r:r + s, c:c + s].any():
                raise ModelError(f"ROI for site {site} overlaps another ROI")
            taken[r:r + s, c:c + s] = True

    @property
    def height(self) -> int:
        return self.counts.shape[0]

    @property
    def width(self) -> int:
        return self.counts.shape[1]

    @property
    def sites(self) -> list[int]:
        return sorted(self.rois)

    def roi_flat_index(self) -> np.ndarray:
        """(n_sites, roi_size**2) flat pixel indices, in site order."""
        if self._flat is None:
            s = self.roi_size
            dr, dc = np.divmod(np.arange(s * s), s)
            origin = np.array([self.rois[k] for k in self.sites]).reshape(-1, 2)
            self._flat = ((origin[:, :1] + dr) * self.width + origin[:, 1:] + dc).astype(np.intp)
        return self._flat

    def roi_sums(self) -> np.ndarray:
        return self.counts.ravel()[self.roi_flat_index()].sum(axis=1)


def row_layout(n_sites: int, params: ImagingParams) -> tuple[tuple[int, int], dict]:
    """Frame shape and ROI origins for a single row of sites."""
    m, s, p = params.margin, params.roi_size, params.site_pitch
    shape = (2 * m + s, 2 * m + (n_sites - 1) * p + s)
    return shape, {i: (m, m + i * p) for i in range(n_sites)}


def psf_weights(params: ImagingParams) -> np.ndarray:
    """Gaussian PSF sampled on the ROI and normalised to sum 1 inside it."""
    s = params.roi_size
    x = np.arange(s) - (s - 1) / 2.0
    g = np.exp(-0.5 * (x / params.psf_sigma) ** 2)
    w = np.outer(g, g)
    return w / w.sum()


def _scale(params: ImagingParams, exposure: float) -> float:
    return exposure / params.reference_exposure


def render_frame(occupancy, exposure: float, params: ImagingParams, rng: np.random.Generator,
                 *, device_mask: np.ndarray | None = None, p_loss: float = 0.0,
                 signal: float | None = None, background: float | None = None,
                 seed: int | None = None):
    """Poisson photon counts for a row of sites.

    Each site draws from its own child stream of ``rng`` and the background
    from one more, so the frame does not depend on the order sites are
    processed. With ``p_loss`` > 0 each atom may be lost at a uniformly random
    point of the exposure, truncating its emission. Returns (frame, alive).
    """
    if exposure <= 0:
        raise ModelError("exposure must be > 0")
    if not 0.0 <= p_loss <= 1.0:
        raise ModelError("p_loss must lie in [0, 1]")
    occ = np.asarray(occupancy, dtype=bool).ravel()
    shape, rois = row_layout(occ.size, params)
    sig = params.signal_photons if signal is None else signal
    bg = params.background_per_roi if background is None else background
    k = _scale(params, exposure)
    streams = rng.spawn(occ.size + 1)

    rate = np.full(shape, k * bg / params.roi_size**2)
    if device_mask is not None:
        if device_mask.shape != shape:
            raise ModelError(f"device mask shape {device_mask.shape} != frame shape {shape}")
        rate = rate + k * params.device_background_per_pixel * device_mask
    counts = streams[-1].poisson(rate).astype(np.int64)

    psf = psf_weights(params)
    s = params.roi_size
    alive = occ.copy()
    for i in np.flatnonzero(occ):
        g = streams[i]
        frac = 1.0
        if p_loss > 0.0 and g.random() < p_loss:
            frac = g.random()
            alive[i] = False
        r, c = rois[i]
        counts[r:r + s, c:c + s] += g.poisson(k * sig * frac * psf)
    return Frame(counts, exposure, rois, s, seed), alive


def imaging_survival(occupancy, exposure: float, params: ImagingParams, rng, p_loss: float, **kw):
    """Render with mid-exposure loss; returns (frame, alive after imaging)."""
    return render_frame(occupancy, exposure, params, rng, p_loss=p_loss, **kw)


@dataclass
class OccupancyMatrix:
    occupied: np.ndarray
    roi_sums: np.ndarray
    threshold: float
    decode_ns: int


def decode_occupancy(frame: Frame, threshold: float) -> OccupancyMatrix:
    """Site occupied iff its ROI sum exceeds ``threshold``; touches only ROI pixels."""
    t0 = time.perf_counter_ns()
    sums = frame.roi_sums()
    occ = sums > threshold
    dt = time.perf_counter_ns() - t0
    return OccupancyMatrix(occ, sums, float(threshold), dt)


@dataclass
class HistogramFit:
    background_mean: float
    signal_mean: float
    weights: tuple[float, float]
    threshold: int
    fidelity: float
    bimodal: bool = True
    iterations: int = 0
    message: str = ""

    def as_dict(self) -> dict:
        return {"background_mean": self.background_mean, "signal_mean": self.signal_mean,
                "weights": list(self.weights), "threshold": self.threshold,
                "fidelity": self.fidelity, "bimodal": self.bimodal,
                "iterations": self.iterations, "message": self.message}


def threshold_fidelity(bg: float, sig: float, t_max: int | None = None) -> tuple[int, float]:
    """Best integer threshold t (occupied iff n > t) and 1 - min (miss + false)/2."""
    if t_max is None:
        t_max = int(sig + 10.0 * math.sqrt(sig) + 10)
    t = np.arange(t_max + 1)
    err = 0.5 * (poisson.cdf(t, sig) + poisson.sf(t, bg))
    i = int(np.argmin(err))
    return int(t[i]), float(1.0 - err[i])


def fit_histogram(roi_sums, *, max_iter: int = 5000, tol: float = 1e-10,
                  min_weight: float = 0.02, min_lr: float = 25.0) -> HistogramFit:
    """Two-component Poisson mixture by EM, then exact-tail threshold and fidelity.

    Initialisation is fixed: components start at the means of the lower and
    upper halves of the sorted data with equal weights. The data are flagged
    unimodal when a minority weight is below ``min_weight`` or the likelihood
    ratio against a single Poisson is below ``min_lr``.
    """
    x = np.asarray(roi_sums)
    if x.size < 500:
        raise ModelError("fit_histogram needs at least 500 samples")
    if np.any(x < 0) or np.any(x != np.round(x)):
        raise ModelError("ROI sums must be non-negative integers")
    vals, cnt = np.unique(x.astype(np.int64), return_counts=True)
    n = cnt.sum()
    xs = np.sort(x)
    half = xs.size // 2
    lb, ls = max(xs[:half].mean(), 1e-3), max(xs[half:].mean(), 2e-3)
    if ls <= lb:
        ls = lb * 1.5 + 1e-3
    wb = 0.5
    lgam = np.array([math.lgamma(v + 1) for v in vals])
    ll_old = -np.inf
    it = 0
    for it in range(1, max_iter + 1):
        la = np.log(wb) + vals * np.log(lb) - lb - lgam
        lc = np.log1p(-wb) + vals * np.log(ls) - ls - lgam
        top = np.maximum(la, lc)
        norm = top + np.log(np.exp(la - top) + np.exp(lc - top))
        ll = float(np.sum(cnt * norm))
        rb = cnt * np.exp(la - norm)
        rs = cnt - rb
        wb = float(np.clip(rb.sum() / n, 1e-12, 1 - 1e-12))
        lb = max(float((rb * vals).sum() / max(rb.sum(), 1e-300)), 1e-9)
        ls = max(float((rs * vals).sum() / max(rs.sum(), 1e-300)), 1e-9)
        if abs(ll - ll_old) <= tol * abs(ll):
            break
        ll_old = ll
    if lb > ls:
        lb, ls, wb = ls, lb, 1.0 - wb
    lam1 = float((cnt * vals).sum() / n)
    ll1 = float(np.sum(cnt * (vals * math.log(max(lam1, 1e-300)) - lam1 - lgam)))
    lr = 2.0 * (ll - ll1)
    if min(wb, 1 - wb) < min_weight or lr < min_lr or ls <= lb:
        return HistogramFit(lb, ls, (wb, 1 - wb), -1, float("nan"), False, it,
                            f"unimodal data (LR {lr:.3g}, weights {wb:.3f}/{1 - wb:.3f})")
    t, fid = threshold_fidelity(lb, ls)
    return HistogramFit(lb, ls, (wb, 1 - wb), t, fid, True, it)


def on_device_parameters(fidelity: float = 0.86, threshold: float = 5.0) -> tuple[float, float]:
    """(signal, background) means whose optimal threshold is ``threshold`` at ``fidelity``.

    The pmf crossing of two Poissons sits at (s - b) / ln(s / b); placing it
    midway between ``threshold`` and ``threshold`` + 1 makes the integer
    optimum equal ``threshold``. For each background the signal is tuned to hit
    the fidelity; the background is then solved so the crossing lands there.
    """
    target = threshold + 0.5

    def signal_for(bg):
        return brentq(lambda s: threshold_fidelity(bg, s)[1] - fidelity
                      if s > bg else -1.0, bg * 1.0001, bg + 200.0, xtol=1e-12)

    def crossing(bg):
        s = signal_for(bg)
        return (s - bg) / math.log(s / bg) - target

    bg = brentq(crossing, 0.5, threshold + 0.5, xtol=1e-10)
    return signal_for(bg), bg


def histogram_table(roi_sums) -> list[tuple[int, int]]:
    vals, cnt = np.unique(np.asarray(roi_sums, dtype=np.int64), return_counts=True)
    return [(int(v), int(c)) for v, c in zip(vals, cnt)]


def write_raw(path, data: np.ndarray, meta: dict) -> tuple[Path, Path]:
    """Write ``path`` (.raw) and its .json sidecar; dtype from the array (uint16 or float64)."""
    path = Path(path)
    data = np.asarray(data)
    if data.dtype.kind in "iu":
        if data.min(initial=0) < 0 or data.max(initial=0) > 0xFFFF:
            raise FrameIOError("counts do not fit in 16-bit unsigned pixels")
        arr, dtype = data.astype("<u2"), "uint16"
    else:
        arr, dtype = data.astype("<f8"), "float64"
    side = {"width": int(arr.shape[1]), "height": int(arr.shape[0]), "dtype": dtype, **meta}
    try:
        path.write_bytes(arr.tobytes(order="C"))
        sidecar = path.with_suffix(".json")
        sidecar.write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise FrameIOError(f"cannot write {path}: {exc.strerror}") from None
    return path, sidecar


def read_raw(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    try:
        meta = json.loads(path.with_suffix(".json").read_text())
        buf = path.read_bytes()
    except (OSError, ValueError) as exc:
        raise FrameIOError(f"cannot read frame {path}: {exc}") from None
    dt = {"uint16": "<u2", "float64": "<f8"}.get(meta.get("dtype", "uint16"))
    if dt is None:
        raise FrameIOError(f"unsupported dtype {meta.get('dtype')!r} in {path}")
    h, w = int(meta["height"]), int(meta["width"])
    if len(buf) != h * w * np.dtype(dt).itemsize:
        raise FrameIOError(f"{path}: size does not match {w}x{h} {meta['dtype']}")
    return np.frombuffer(buf, dtype=dt).reshape(h, w).copy(), meta


def write_frame(path, frame: Frame) -> tuple[Path, Path]:
    meta = {"exposure_ms": frame.exposure, "roi_size": frame.roi_size,
            "roi_list": [[int(k), int(r), int(c)] for k, (r, c) in sorted(frame.rois.items())],
            "seed": frame.seed}
    return write_raw(path, frame.counts, meta)


def read_frame(path) -> Frame:
    data, meta = read_raw(path)
    rois = {int(k): (int(r), int(c)) for k, r, c in meta.get("roi_list", [])}
    return Frame(data.astype(np.int64), float(meta["exposure_ms"]), rois,
                 int(meta.get("roi_size", 4)), meta.get("seed"))
