"""Shared types, constants, configuration ingestion and seeded RNG streams.

Units are fixed per field and carried in the config key names:
nm for film thickness and wavelength, um for lengths, MHz for RF and optical
detunings, ms for sequence times, us for integration steps and uK (k_B units)
for energies and temperatures.
"""
from __future__ import annotations

import configparser
import hashlib
import io
import math
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

# Cs-133 mass over k_B, in uK per (um/us)^2.
CS_MASS_AMU = 132.905451933
_AMU_KG = 1.66053906660e-27
_KB = 1.380649e-23
CS_MASS_UK = CS_MASS_AMU * _AMU_KG / _KB * 1e6

# Fixed RNG stream families; a family is the first element of the spawn key.
STREAM_MC = 1
STREAM_IMAGING = 2
STREAM_PIPELINE = 3
STREAM_SPECTROSCOPY = 4
STREAM_LIFETIME = 5
STREAM_AUTOFOCUS = 6

SEED_ENV = "ATOMFORGE_SEED"
DEFAULT_CONFIG = Path(__file__).with_name("data") / "default.cfg"


class AtomforgeError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 3


class ConfigError(AtomforgeError):
    exit_code = 2


class ModelError(AtomforgeError):
    """A model or feasibility failure (bad physics inputs, infeasible plan)."""

    exit_code = 3


def _check(cond: bool, name: str, bound: str) -> None:
    if not cond:
        raise ConfigError(f"invariant violated: {name} must satisfy {bound}")


@dataclass(frozen=True)
class ChipGeometry:
    film_thickness: float = 330.0  # nm
    film_index: float = 2.0
    device_pitch: float = 11.0  # um
    device_width: float = 1.1  # um
    device_length: float = 63.0  # um
    device_tilt: float = 0.0  # mrad
    loading_region_offset: tuple[float, float] = (-100.0, 5.5)  # um, (x, y)
    n_devices: int = 12

    def __post_init__(self):
        _check(self.film_thickness > 0, "film_thickness", "> 0")
        _check(self.film_index > 1, "film_index", "> 1")
        _check(self.device_width > 0, "device_width", "> 0")
        _check(self.device_pitch > self.device_width, "device_pitch", "> device_width")
        _check(abs(self.device_tilt) < 50, "device_tilt", "|tilt| < 50 mrad")
        _check(len(self.loading_region_offset) == 2, "loading_region_offset", "2 components")
        _check(self.device_length > 0, "device_length", "> 0")
        _check(self.n_devices >= 1, "n_devices", ">= 1")

    def device_center_y(self, j: int) -> float:
        return j * self.device_pitch


@dataclass(frozen=True)
class TweezerArray:
    wavelength: float = 935.0  # nm
    power_per_tweezer: float = 2.4  # mW
    waist: float = 1.1  # um
    tones_x: tuple[float, ...] = tuple(90.0 + 5.0 * i for i in range(9))  # MHz
    tones_y: tuple[float, ...] = tuple(90.0 + 5.0 * i for i in range(9))  # MHz
    aod_scale: float = 2.2  # um per MHz
    # Free-space depth per unit peak intensity, uK per (mW/um^2).
    trap_depth_scale: float = 1583.9
    # D1 Stark shift per unit intensity ratio, MHz.
    stark_kappa: float = 1.0

    def __post_init__(self):
        _check(self.wavelength > 0, "wavelength", "> 0")
        _check(self.power_per_tweezer > 0, "power_per_tweezer", "> 0")
        _check(self.waist > 0, "waist", "> 0")
        _check(self.aod_scale > 0, "aod_scale", "> 0")
        _check(math.isfinite(self.stark_kappa), "stark_kappa", "finite")
        for name in ("tones_x", "tones_y"):
            tones = getattr(self, name)
            _check(len(tones) >= 1, name, "at least one tone")
            if any(b <= a for a, b in zip(tones, tones[1:])):
                raise ConfigError(
                    f"invariant violated: {name} has a tone crossing/duplicate; "
                    "tones must be strictly increasing")

    @property
    def rayleigh_range(self) -> float:
        """Rayleigh range in um."""
        return math.pi * self.waist**2 / (self.wavelength * 1e-3)

    @property
    def peak_intensity(self) -> float:
        """Focal intensity in mW/um^2."""
        return 2.0 * self.power_per_tweezer / (math.pi * self.waist**2)

    @property
    def free_space_depth(self) -> float:
        """Free-space trap depth in uK."""
        return self.trap_depth_scale * self.peak_intensity


@dataclass(frozen=True)
class RateTable:
    load_prob: float = 0.55
    imaging_survival: float = 0.875
    rearrange_survival: float = 0.77
    lifetime_loading: float = 13.6  # s
    lifetime_device: float = 0.78  # s

    def __post_init__(self):
        for name in ("load_prob", "imaging_survival", "rearrange_survival"):
            v = getattr(self, name)
            _check(0.0 <= v <= 1.0, name, "in [0, 1]")
        _check(self.lifetime_loading > 0, "lifetime_loading", "> 0")
        _check(self.lifetime_device > 0, "lifetime_device", "> 0")


@dataclass(frozen=True)
class ImagingParams:
    roi_size: int = 4  # pixels
    signal_photons: float = 25.0  # per ROI at the reference exposure
    reference_exposure: float = 40.0  # ms
    exposure: float = 40.0  # ms
    background_per_roi: float = 2.0  # per ROI at the reference exposure
    device_background_per_pixel: float = 0.0  # extra rate inside device masks
    psf_sigma: float = 1.0  # pixels
    site_pitch: int = 8  # pixels between ROI origins
    margin: int = 4  # pixels around the ROI row
    threshold: float = 5.0  # photons; occupied iff ROI sum > threshold
    on_device_fidelity: float = 0.86

    def __post_init__(self):
        _check(self.roi_size >= 1, "roi_size", ">= 1")
        _check(self.signal_photons >= 0, "signal_photons", ">= 0")
        _check(self.reference_exposure > 0, "reference_exposure", "> 0")
        _check(self.exposure > 0, "exposure", "> 0")
        _check(self.background_per_roi >= 0, "background_per_roi", ">= 0")
        _check(self.device_background_per_pixel >= 0, "device_background_per_pixel", ">= 0")
        _check(self.psf_sigma > 0, "psf_sigma", "> 0")
        _check(self.site_pitch >= self.roi_size, "site_pitch", ">= roi_size")
        _check(self.margin >= 0, "margin", ">= 0")
        _check(0.5 < self.on_device_fidelity < 1.0, "on_device_fidelity", "in (0.5, 1)")


@dataclass(frozen=True)
class TwoPhotonParams:
    amplitude: float = 25.0  # photons per exposure on the ridge
    gamma_two_photon: float = 10.0  # MHz FWHM
    gamma_single: float = 20.0  # MHz FWHM of the resonant-heating loss
    light_shift: float = 30.0  # MHz blue shift of the two-photon ridge
    loss_rate: float = 1.0  # per ms, on single-photon resonance
    exposure: float = 40.0  # ms

    def __post_init__(self):
        _check(self.gamma_two_photon > 0, "gamma_two_photon", "> 0")
        _check(self.gamma_single > 0, "gamma_single", "> 0")
        _check(self.loss_rate >= 0, "loss_rate", ">= 0")
        _check(self.exposure > 0, "exposure", "> 0")
        _check(self.amplitude >= 0, "amplitude", ">= 0")


@dataclass(frozen=True)
class MCParams:
    temperature: float = 50.0  # uK
    approach_speed: float = 6.0  # um/ms
    focal_offset: float = 300.0  # nm
    timestep: float = 0.02  # us
    n_trials: int = 10000
    ramp_span: float = 1.2  # half-length of the lateral approach, in waists
    seed: int = 42

    def __post_init__(self):
        _check(self.temperature >= 0, "temperature", ">= 0")
        _check(self.approach_speed > 0, "approach_speed", "> 0")
        _check(self.timestep > 0, "timestep", "> 0")
        _check(self.n_trials >= 1, "n_trials", ">= 1")
        _check(self.ramp_span > 0, "ramp_span", "> 0")
        _check(0 <= self.seed < 2**64, "seed", "in [0, 2^64)")


@dataclass(frozen=True)
class PlannerParams:
    compression_time: float = 1.0  # ms
    max_slew: float = 100.0  # MHz/ms
    alignment: str = "device"  # left | center | device
    first_device: int = 0
    x_speed: float = 30.0  # um/ms, X transport move
    clearance: float = 2.0  # um, minimum distance to a device edge while in transit
    intra_device_spacing: float = 5.5  # um
    park_x: float = -10.0  # um, where surplus atoms wait off-device
    target_device: int = 0
    drop_ramp: float = 0.0  # ms, ramp-down time of a dropped tweezer

    def __post_init__(self):
        _check(self.drop_ramp >= 0, "drop_ramp", ">= 0")
        _check(self.compression_time > 0, "compression_time", "> 0")
        _check(self.max_slew > 0, "max_slew", "> 0")
        _check(self.alignment in ("left", "center", "device"), "alignment",
               "one of left|center|device")
        _check(self.x_speed > 0, "x_speed", "> 0")
        _check(self.clearance >= 0, "clearance", ">= 0")
        _check(self.intra_device_spacing > 0, "intra_device_spacing", "> 0")
        _check(self.first_device >= 0, "first_device", ">= 0")
        _check(self.target_device >= 0, "target_device", ">= 0")


@dataclass(frozen=True)
class Config:
    chip: ChipGeometry = field(default_factory=ChipGeometry)
    tweezer: TweezerArray = field(default_factory=TweezerArray)
    rates: RateTable = field(default_factory=RateTable)
    imaging: ImagingParams = field(default_factory=ImagingParams)
    twophoton: TwoPhotonParams = field(default_factory=TwoPhotonParams)
    mc: MCParams = field(default_factory=MCParams)
    planner: PlannerParams = field(default_factory=PlannerParams)

    @property
    def seed(self) -> int:
        return self.mc.seed


# section -> config key -> (dataclass field, kind)
SCHEMA: dict[str, tuple[type, dict[str, tuple[str, str]]]] = {
    "chip": (ChipGeometry, {
        "film_thickness_nm": ("film_thickness", "float"),
        "film_index": ("film_index", "float"),
        "device_pitch_um": ("device_pitch", "float"),
        "device_width_um": ("device_width", "float"),
        "device_length_um": ("device_length", "float"),
        "device_tilt_mrad": ("device_tilt", "float"),
        "loading_region_offset_um": ("loading_region_offset", "floats"),
        "n_devices": ("n_devices", "int"),
    }),
    "tweezer": (TweezerArray, {
        "wavelength_nm": ("wavelength", "float"),
        "power_mw": ("power_per_tweezer", "float"),
        "waist_um": ("waist", "float"),
        "tones_x_mhz": ("tones_x", "floats"),
        "tones_y_mhz": ("tones_y", "floats"),
        "aod_scale_um_per_mhz": ("aod_scale", "float"),
        "trap_depth_scale_uk_per_mw_um2": ("trap_depth_scale", "float"),
        "stark_kappa_mhz": ("stark_kappa", "float"),
    }),
    "rates": (RateTable, {
        "load_prob": ("load_prob", "float"),
        "imaging_survival": ("imaging_survival", "float"),
        "rearrange_survival": ("rearrange_survival", "float"),
        "lifetime_loading_s": ("lifetime_loading", "float"),
        "lifetime_device_s": ("lifetime_device", "float"),
    }),
    "imaging": (ImagingParams, {
        "roi_size_px": ("roi_size", "int"),
        "signal_photons": ("signal_photons", "float"),
        "reference_exposure_ms": ("reference_exposure", "float"),
        "exposure_ms": ("exposure", "float"),
        "background_per_roi": ("background_per_roi", "float"),
        "device_background_per_pixel": ("device_background_per_pixel", "float"),
        "psf_sigma_px": ("psf_sigma", "float"),
        "site_pitch_px": ("site_pitch", "int"),
        "margin_px": ("margin", "int"),
        "threshold_photons": ("threshold", "float"),
        "on_device_fidelity": ("on_device_fidelity", "float"),
    }),
    "twophoton": (TwoPhotonParams, {
        "amplitude_photons": ("amplitude", "float"),
        "gamma_two_photon_mhz": ("gamma_two_photon", "float"),
        "gamma_single_mhz": ("gamma_single", "float"),
        "light_shift_mhz": ("light_shift", "float"),
        "loss_rate_per_ms": ("loss_rate", "float"),
        "exposure_ms": ("exposure", "float"),
    }),
    "mc": (MCParams, {
        "temperature_uk": ("temperature", "float"),
        "approach_speed_um_per_ms": ("approach_speed", "float"),
        "focal_offset_nm": ("focal_offset", "float"),
        "timestep_us": ("timestep", "float"),
        "n_trials": ("n_trials", "int"),
        "ramp_span_waists": ("ramp_span", "float"),
        "seed": ("seed", "int"),
    }),
    "planner": (PlannerParams, {
        "compression_time_ms": ("compression_time", "float"),
        "max_slew_mhz_per_ms": ("max_slew", "float"),
        "alignment": ("alignment", "str"),
        "first_device": ("first_device", "int"),
        "x_speed_um_per_ms": ("x_speed", "float"),
        "clearance_um": ("clearance", "float"),
        "intra_device_spacing_um": ("intra_device_spacing", "float"),
        "park_x_um": ("park_x", "float"),
        "target_device": ("target_device", "int"),
        "drop_ramp_ms": ("drop_ramp", "float"),
    }),
}


def _parse_value(section: str, key: str, raw: str, kind: str) -> Any:
    try:
        if kind == "float":
            return float(raw)
        if kind == "int":
            return int(raw)
        if kind == "floats":
            return tuple(float(v) for v in raw.replace(",", " ").split())
        return raw.strip()
    except ValueError:
        raise ConfigError(f"schema violation: [{section}] {key} = {raw!r} is not {kind}") from None


def _format_value(value: Any, kind: str) -> str:
    if kind == "floats":
        return ", ".join(repr(float(v)) for v in value)
    if kind == "float":
        return repr(float(value))
    return str(value)


def parse_config(text: str, *, env: dict[str, str] | None = None) -> Config:
    """Parse config text; unknown sections/keys and bad values raise ConfigError."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"schema violation: {exc}".splitlines()[0]) from None

    unknown = [s for s in parser.sections() if s not in SCHEMA]
    if unknown:
        raise ConfigError(f"schema violation: unknown section(s) {', '.join(unknown)}")

    parts = {}
    for section, (cls, keys) in SCHEMA.items():
        kwargs = {}
        if parser.has_section(section):
            bad = [k for k in parser[section] if k not in keys]
            if bad:
                raise ConfigError(f"schema violation: unknown key(s) in [{section}]: {', '.join(bad)}")
            for key, raw in parser[section].items():
                attr, kind = keys[key]
                kwargs[attr] = _parse_value(section, key, raw, kind)
        try:
            parts[section] = cls(**kwargs)
        except ConfigError as exc:
            raise ConfigError(f"[{section}] {exc}") from None

    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        seed = _parse_value("mc", SEED_ENV, env[SEED_ENV], "int")
        parts["mc"] = replace(parts["mc"], seed=seed)
    return Config(**parts)


def load_config(path: str | os.PathLike | None = None, *, env: dict[str, str] | None = None) -> Config:
    """Load and validate a config file (the packaged default when path is None)."""
    path = Path(path) if path is not None else DEFAULT_CONFIG
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"), env=env)


def dump_config(config: Config) -> str:
    out = io.StringIO()
    for section, (_, keys) in SCHEMA.items():
        part = getattr(config, section)
        out.write(f"[{section}]\n")
        for key, (attr, kind) in keys.items():
            out.write(f"{key} = {_format_value(getattr(part, attr), kind)}\n")
        out.write("\n")
    return out.getvalue()


def config_hash(config: Config) -> str:
    return hashlib.sha256(dump_config(config).encode()).hexdigest()


def make_rng(seed: int, stream_id: int | Sequence[int]) -> np.random.Generator:
    """Deterministic generator for (seed, stream_id).

    ``stream_id`` may be an int or a tuple of ints (e.g. ``(STREAM_MC, trial)``);
    distinct ids give independent streams via SeedSequence spawn keys.
    """
    key = (int(stream_id),) if np.isscalar(stream_id) else tuple(int(s) for s in stream_id)
    ss = np.random.SeedSequence(int(seed), spawn_key=key)
    return np.random.Generator(np.random.PCG64(ss))


def config_fields(cls) -> list[str]:
    return [f.name for f in fields(cls)]
