"""Image post-processing: frame averaging, background subtraction and device overlays."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import ModelError
from .imaging import Frame, write_raw


@dataclass
class AveragedImage:
    mean: np.ndarray
    n_frames: int = 1
    exposure: float | None = None
    offset: float = 0.0
    scale: float = 1.0
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        if self.n_frames < 1:
            raise ModelError("n_frames must be >= 1")

    def meta(self) -> dict:
        return {"n_frames": self.n_frames, "exposure_ms": self.exposure, "offset": self.offset,
                "scale": self.scale, **self.provenance}


def average_frames(frames) -> AveragedImage:
    """Pixel-wise mean of frames sharing shape and exposure."""
    frames = list(frames)
    if not frames:
        raise ModelError("no frames to average")
    arrs = [np.asarray(f.counts if isinstance(f, Frame) else f, dtype=float) for f in frames]
    shape = arrs[0].shape
    if any(a.shape != shape for a in arrs):
        raise ModelError("frame dimensions differ")
    exps = {f.exposure for f in frames if isinstance(f, Frame)}
    if len(exps) > 1:
        raise ModelError("frame exposures differ")
    # exact sums (integer, or correctly rounded fsum for reals) keep the mean
    # independent of frame order
    if all(isinstance(f, Frame) or np.asarray(f).dtype.kind in "iub" for f in frames):
        total = np.sum([np.asarray(a, dtype=np.int64) for a in arrs], axis=0).astype(float)
    else:
        stack = np.stack(arrs).reshape(len(arrs), -1)
        total = np.array([math.fsum(col) for col in stack.T]).reshape(shape)
    return AveragedImage(total / len(arrs), len(arrs), exps.pop() if exps else None)


def subtract_background(img: AveragedImage, bg: AveragedImage | np.ndarray) -> AveragedImage:
    """img - bg, shifted up by max(0, -min) so no pixel is negative."""
    a = img.mean
    b = bg.mean if isinstance(bg, AveragedImage) else np.asarray(bg, dtype=float)
    if a.shape != b.shape:
        raise ModelError("image and background dimensions differ")
    d = a - b
    offset = max(0.0, -float(d.min()))
    out = d + offset if offset > 0 else d
    prov = dict(img.provenance, background_frames=getattr(bg, "n_frames", None))
    return AveragedImage(out, img.n_frames, img.exposure, offset, img.scale, prov)


SCALE_RULES = ("match-peak", "match-norm")


def overlay_scale(atom_img: np.ndarray, device_img: np.ndarray, rule: str = "match-peak") -> float:
    if rule == "match-peak":
        a, d = float(np.max(atom_img)), float(np.max(device_img))
    elif rule == "match-norm":
        a, d = float(np.linalg.norm(atom_img)), float(np.linalg.norm(device_img))
    else:
        raise ModelError(f"unknown scale rule {rule!r}; use one of {', '.join(SCALE_RULES)}")
    return d / a if a > 0 else 1.0


def overlay_devices(atom_img, device_img, rule: str = "match-peak", scale: float | None = None):
    """Composite atom_img * s + device_img; returns (composite, s)."""
    a = atom_img.mean if isinstance(atom_img, AveragedImage) else np.asarray(atom_img, float)
    d = device_img.mean if isinstance(device_img, AveragedImage) else np.asarray(device_img, float)
    if a.shape != d.shape:
        raise ModelError("atom and device image dimensions differ")
    s = overlay_scale(a, d, rule) if scale is None else float(scale)
    return a * s + d, s


def write_averaged(path, img: AveragedImage) -> tuple[Path, Path]:
    return write_raw(path, img.mean, img.meta())


def write_pgm(path, image: np.ndarray) -> Path:
    """8-bit portable greymap, linearly stretched between min and max."""
    a = np.asarray(image, dtype=float)
    lo, hi = float(a.min()), float(a.max())
    g = np.zeros(a.shape, np.uint8) if hi <= lo else np.round(255 * (a - lo) / (hi - lo)).astype(np.uint8)
    path = Path(path)
    path.write_bytes(f"P5\n{a.shape[1]} {a.shape[0]}\n255\n".encode() + g.tobytes())
    return path
