"""Tweezer fields, thin-film reflection and the standing-wave lattice above a membrane.

Heights above the membrane are in nm at the public interface; the internal
helpers used by the Monte Carlo take um.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

from .core import ChipGeometry, ModelError, TweezerArray


@dataclass(frozen=True)
class ReflectionResult:
    amplitude: complex
    transmission: complex

    @property
    def power_reflectance(self) -> float:
        return abs(self.amplitude) ** 2

    @property
    def power_transmittance(self) -> float:
        return abs(self.transmission) ** 2

    @property
    def phase(self) -> float:
        return float(np.angle(self.amplitude))


@dataclass(frozen=True)
class LatticeMaximum:
    z: float  # nm
    ratio: float
    depth: float  # uK


@dataclass
class LatticeProfile:
    z_grid: np.ndarray  # nm
    intensity_ratio: np.ndarray
    stark_shift: np.ndarray  # MHz
    maxima: list[LatticeMaximum]
    reflection: ReflectionResult | None = None

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["z_nm", "intensity_ratio", "stark_shift_mhz"])
            for z, i, s in zip(self.z_grid, self.intensity_ratio, self.stark_shift):
                w.writerow([f"{z:.6f}", f"{i:.12g}", f"{s:.12g}"])


def gaussian_intensity(radial, axial, tw: TweezerArray):
    """Focused Gaussian intensity normalised to 1 at the focus (um inputs)."""
    radial = np.asarray(radial, dtype=float)
    axial = np.asarray(axial, dtype=float)
    zr = tw.rayleigh_range
    wz2 = tw.waist**2 * (1.0 + (axial / zr) ** 2)
    out = (tw.waist**2 / wz2) * np.exp(-2.0 * radial**2 / wz2)
    return out[()] if out.ndim == 0 else out


def membrane_reflection(thickness: float, index: float, wavelength: float) -> ReflectionResult:
    """Normal-incidence reflection of a lossless film suspended in vacuum.

    Uses the characteristic (transfer) matrix of a single layer; thickness and
    wavelength in the same unit (nm). Phases follow the exp(-i w t) convention,
    matching the standing-wave expression below.
    """
    if thickness < 0:
        raise ModelError("film thickness must be >= 0")
    if index <= 1:
        raise ModelError("film index must be > 1")
    delta = 2.0 * math.pi * index * thickness / wavelength
    c, s = math.cos(delta), math.sin(delta)
    m11, m12 = c, -1j * s / index
    m21, m22 = -1j * index * s, c
    # vacuum on both sides: eta0 = eta_s = 1
    b = m11 + m12
    cc = m21 + m22
    denom = b + cc
    r = (b - cc) / denom
    t = 2.0 / denom
    return ReflectionResult(complex(r), complex(t))


def standing_wave_ratio(z_um, r: complex, wavelength_nm: float, strength=1.0):
    """Interference factor |1 + s r exp(2ikz)|^2 at height z (um) above the surface.

    ``strength`` s in [0, 1] scales the reflected amplitude (partial overlap of
    the beam with the device).
    """
    k = 2.0 * math.pi / (wavelength_nm * 1e-3)
    a = strength * abs(r)
    return 1.0 + a * a + 2.0 * a * np.cos(2.0 * k * np.asarray(z_um) + np.angle(r))


def axial_envelope(z_um, focus_um: float, rayleigh_um: float):
    u = (np.asarray(z_um) - focus_um) / rayleigh_um
    return 1.0 / (1.0 + u * u)


def stark_shift_d1(intensity_ratio, kappa: float):
    """D1 light shift, linear in the local intensity ratio (MHz)."""
    if not math.isfinite(kappa):
        raise ModelError("kappa must be finite")
    return kappa * np.asarray(intensity_ratio, dtype=float)


def magic_d2_shift(intensity_ratio):
    """D2 shift at the magic trap wavelength: zero for every intensity."""
    return np.zeros_like(np.asarray(intensity_ratio, dtype=float))


def _ratio_fn(r, tw, envelope, focal_offset_nm):
    zr = tw.rayleigh_range
    zf = focal_offset_nm * 1e-3

    def f(z_nm):
        zu = np.asarray(z_nm) * 1e-3
        sw = standing_wave_ratio(zu, r, tw.wavelength)
        if envelope == "gaussian":
            sw = sw * axial_envelope(zu, zf, zr)
        return sw
    return f


def lattice_profile(geom: ChipGeometry, tw: TweezerArray, z_max: float = 1500.0,
                    n_points: int = 3001, *, envelope: str = "plane",
                    focal_offset: float = 0.0, min_maxima: int = 3) -> LatticeProfile:
    """Axial intensity and D1 shift above the membrane, with refined maxima.

    envelope="plane" applies no axial falloff; "gaussian" multiplies by the
    tweezer's Lorentzian axial envelope focused at ``focal_offset`` nm above
    the surface. With a non-reflecting film the check on ``min_maxima`` is
    skipped since there is no lattice to resolve.
    """
    if envelope not in ("plane", "gaussian"):
        raise ModelError(f"unknown envelope {envelope!r}")
    if n_points < 3 or z_max <= 0:
        raise ModelError("need z_max > 0 and n_points >= 3")
    refl = membrane_reflection(geom.film_thickness, geom.film_index, tw.wavelength)
    r = refl.amplitude
    f = _ratio_fn(r, tw, envelope, focal_offset)
    z = np.linspace(0.0, z_max, n_points)
    ratio = f(z)

    maxima = []
    if abs(r) > 1e-12:
        idx = np.flatnonzero((ratio[1:-1] > ratio[:-2]) & (ratio[1:-1] >= ratio[2:])) + 1
        for i in idx:
            res = minimize_scalar(lambda x: -f(x), bounds=(z[i - 1], z[i + 1]),
                                  method="bounded", options={"xatol": 1e-7})
            zm = float(res.x)
            rm = float(f(zm))
            maxima.append(LatticeMaximum(zm, rm, tw.free_space_depth * rm))
        if len(maxima) < min_maxima:
            raise ModelError(
                f"found {len(maxima)} lattice maxima below z_max={z_max} nm; "
                f"need {min_maxima}, increase z_max")
    return LatticeProfile(z, ratio, stark_shift_d1(ratio, tw.stark_kappa), maxima, refl)


def maxima_stark_shifts(profile: LatticeProfile, kappa: float, n: int = 3) -> tuple[float, ...]:
    """Stark shifts at the first ``n`` maxima, used as mixture centres."""
    return tuple(float(stark_shift_d1(m.ratio, kappa)) for m in profile.maxima[:n])

