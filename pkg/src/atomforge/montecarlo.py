"""Classical Monte Carlo of atoms carried from free space onto the membrane.

The tweezer slides laterally over the device edge at the approach speed. The
reflected field is switched in smoothly as the beam overlaps the device
(lateral overlap of a Gaussian spot with a half-plane). The surface becomes an
absorbing wall once the beam centre is over the device. Motion is reduced to
the tweezer axis z (height above the membrane, um) and integrated with
velocity Verlet.

Internal units: um, us, uK. Mass enters as m/k_B in uK/(um/us)^2.
"""
from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numba
import numpy as np
from scipy.special import erf

from .core import (CS_MASS_UK, STREAM_MC, Config, ModelError, make_rng)
from .optics import membrane_reflection

LOST = -1
ENERGY_TOL = 1e-4


class TrapTooShallow(ModelError):
    pass


@dataclass(frozen=True)
class TransferScenario:
    temperature: float = 50.0  # uK
    trap_depth_free: float = 2000.0  # uK
    approach_speed: float = 6.0  # um/ms
    focal_offset: float = 200.0  # nm, focus height above the device plane
    timestep: float = 0.02  # us
    n_trials: int = 10000
    reflection: complex = complex(-0.5704448563268955, 0.1298444441873618)
    wavelength: float = 935.0  # nm
    waist: float = 1.1  # um
    ramp_span: float = 1.2  # waists either side of the device edge
    window: float = 20.0  # um above the focus before an atom counts as escaped

    def __post_init__(self):
        if self.temperature < 0:
            raise ModelError("temperature must be >= 0")
        if self.approach_speed <= 0:
            raise ModelError("approach_speed must be > 0")
        if self.timestep <= 0:
            raise ModelError("timestep must be > 0")
        if self.trap_depth_free <= 0:
            raise ModelError("trap_depth_free must be > 0")
        if self.n_trials < 1:
            raise ModelError("n_trials must be >= 1")

    @classmethod
    def from_config(cls, cfg: Config, **overrides) -> "TransferScenario":
        tw, mc = cfg.tweezer, cfg.mc
        r = membrane_reflection(cfg.chip.film_thickness, cfg.chip.film_index, tw.wavelength)
        kw = dict(temperature=mc.temperature, trap_depth_free=tw.free_space_depth,
                  approach_speed=mc.approach_speed, focal_offset=mc.focal_offset,
                  timestep=mc.timestep, n_trials=mc.n_trials, reflection=r.amplitude,
                  wavelength=tw.wavelength, waist=tw.waist, ramp_span=mc.ramp_span)
        kw.update(overrides)
        return cls(**kw)

    @property
    def k(self) -> float:
        return 2.0 * math.pi / (self.wavelength * 1e-3)

    @property
    def rayleigh_range(self) -> float:
        return math.pi * self.waist**2 / (self.wavelength * 1e-3)

    @property
    def focus(self) -> float:
        return self.focal_offset * 1e-3

    def ramp(self) -> tuple[np.ndarray, np.ndarray]:
        """Reflected-amplitude overlap s(t) and wall flag for every step."""
        speed = self.approach_speed * 1e-3  # um/us
        half = self.ramp_span * self.waist
        n_steps = max(1, int(math.ceil(2.0 * half / (speed * self.timestep))))
        y = -half + speed * self.timestep * np.arange(n_steps + 1)
        s = 0.5 * (1.0 + erf(math.sqrt(2.0) * y / self.waist))
        return s, y >= 0.0

    def potential(self, z, strength: float):
        """U(z) in uK for reflected-amplitude overlap ``strength``."""
        z = np.asarray(z, dtype=float)
        u = (z - self.focus) / self.rayleigh_range
        a = strength * abs(self.reflection)
        lat = 1.0 + a * a + 2.0 * a * np.cos(2.0 * self.k * z + np.angle(self.reflection))
        return -self.trap_depth_free * lat / (1.0 + u * u)


@dataclass
class AtomEnsemble:
    """Per-atom records; dead atoms stay dead."""
    site_index: np.ndarray
    position: np.ndarray  # (n, 3) um
    axial_energy: np.ndarray  # uK
    well_index: np.ndarray  # 1, 2, ... or LOST
    alive: np.ndarray

    def kill(self, mask) -> None:
        mask = np.asarray(mask, dtype=bool)
        self.alive &= ~mask
        self.well_index[mask] = LOST


@dataclass
class LoadingDistribution:
    counts: dict[int, int]
    n_trials: int
    meta: dict = field(default_factory=dict)

    def weight(self, well: int) -> float:
        return self.counts.get(well, 0) / self.n_trials

    def stderr(self, well: int) -> float:
        w = self.weight(well)
        return math.sqrt(w * (1.0 - w) / self.n_trials)

    @property
    def lost(self) -> float:
        return self.weight(LOST)

    @property
    def wells(self) -> list[int]:
        return sorted(k for k in self.counts if k != LOST)

    def weights_row(self, k: int = 3) -> list[float]:
        """[w_z1 .. w_zk, w_z(k+1)+, w_lost]."""
        row = [self.weight(j) for j in range(1, k + 1)]
        row.append(sum(c for j, c in self.counts.items() if j > k) / self.n_trials)
        row.append(self.lost)
        return row

    def stderr_row(self, k: int = 3) -> list[float]:
        out = []
        for w in self.weights_row(k):
            out.append(math.sqrt(w * (1.0 - w) / self.n_trials))
        return out


def sample_thermal_state(temperature: float, potential, z_range: tuple[float, float],
                         rng: np.random.Generator, n: int = 1, *, e_max: float = np.inf,
                         mass: float = CS_MASS_UK, max_attempts: int = 200_000,
                         grid: int = 4001):
    """Rejection-sample (z, v) from exp(-E/kT) restricted to E < e_max.

    ``potential`` maps z (um) to U (uK). The well must be deeper than k_B T
    measured from its minimum to ``e_max`` (or to the window edge when
    e_max is infinite), otherwise TrapTooShallow is raised.
    """
    lo, hi = z_range
    zg = np.linspace(lo, hi, grid)
    ug = potential(zg)
    i0 = int(np.argmin(ug))
    u_min = float(ug[i0])
    if temperature == 0.0:
        return np.full(n, zg[i0]), np.zeros(n)
    rim = e_max if np.isfinite(e_max) else float(min(ug[0], ug[-1]))
    if rim - u_min < temperature:
        raise TrapTooShallow(
            f"well depth {rim - u_min:.4g} uK is below k_B T = {temperature:.4g} uK")

    return _rejection(temperature, potential, lo, hi, u_min, e_max, rng, n, mass, max_attempts)


def _rejection(temperature, potential, lo, hi, u_min, e_max, rng, n, mass, max_attempts):
    zs = np.empty(n)
    vs = np.empty(n)
    got = 0
    tried = 0
    sig_v = math.sqrt(temperature / mass)
    batch = max(64, 4 * n)
    while got < n:
        if tried >= max_attempts:
            raise TrapTooShallow(f"rejection sampling accepted {got}/{n} after {tried} proposals")
        zp = rng.uniform(lo, hi, batch)
        up = potential(zp)
        keep = rng.uniform(size=batch) < np.exp(-(up - u_min) / temperature)
        vp = rng.normal(0.0, sig_v, batch)
        keep &= 0.5 * mass * vp**2 + up < e_max
        tried += batch
        zp, vp = zp[keep], vp[keep]
        take = min(n - got, zp.size)
        zs[got:got + take] = zp[:take]
        vs[got:got + take] = vp[:take]
        got += take
    return zs, vs


@numba.njit(cache=True, nogil=True)
def _integrate(z, v, zf, u0, rabs, phi, k, zr, s_tab, wall_on, dt, zmax, mass):
    n = z.size
    n_steps = s_tab.size - 1
    alive = np.ones(n, np.bool_)
    tk = 2.0 * k
    inv_m = 1.0 / mass
    for i in range(n):
        zi = z[i]
        vi = v[i]
        s = s_tab[0]
        u = (zi - zf) / zr
        env = 1.0 / (1.0 + u * u)
        ph = tk * zi + phi
        lat = 1.0 + s * s * rabs * rabs + 2.0 * s * rabs * math.cos(ph)
        a = u0 * inv_m * ((-2.0 * u / zr) * env * env * lat - env * 2.0 * tk * s * rabs * math.sin(ph))
        for st in range(1, n_steps + 1):
            vi += 0.5 * dt * a
            zi += dt * vi
            if (zi <= 0.0 and wall_on[st]) or zi > zmax:
                alive[i] = False
                break
            s = s_tab[st]
            u = (zi - zf) / zr
            env = 1.0 / (1.0 + u * u)
            ph = tk * zi + phi
            lat = 1.0 + s * s * rabs * rabs + 2.0 * s * rabs * math.cos(ph)
            a = u0 * inv_m * ((-2.0 * u / zr) * env * env * lat - env * 2.0 * tk * s * rabs * math.sin(ph))
            vi += 0.5 * dt * a
        z[i] = zi
        v[i] = vi
    return alive


def _kernel_args(sc: TransferScenario):
    return (sc.focus, sc.trap_depth_free, abs(sc.reflection), float(np.angle(sc.reflection)),
            sc.k, sc.rayleigh_range)


def integrate(sc: TransferScenario, z, v, s_tab, wall_on):
    """Advance copies of (z, v) through the schedule; returns (z, v, alive)."""
    z = np.array(z, dtype=float)
    v = np.array(v, dtype=float)
    zf, u0, rabs, phi, k, zr = _kernel_args(sc)
    alive = _integrate(z, v, zf, u0, rabs, phi, k, zr, np.asarray(s_tab, float),
                       np.asarray(wall_on, np.bool_), sc.timestep, zf + sc.window, CS_MASS_UK)
    return z, v, alive


@dataclass(frozen=True)
class WellMap:
    """Basins of the final potential: edges in z and the escape barrier per well."""
    edges: np.ndarray  # len K+1, edges[0] = 0, edges[-1] = inf
    barriers: np.ndarray  # len K+1, barrier energy at each edge (uK)
    minima: np.ndarray  # z of each well minimum


def well_map(sc: TransferScenario, strength: float, n_grid: int = 400_001) -> WellMap:
    """Wells are the potential minima; a well's edges are the neighbouring maxima.

    The surface-side edge of well 1 is the surface itself, with barrier equal to
    the highest potential between the surface and the first minimum.
    """
    zz = np.linspace(1e-6, sc.focus + sc.window, n_grid)
    uu = sc.potential(zz, strength)
    imin = np.flatnonzero((uu[1:-1] < uu[:-2]) & (uu[1:-1] <= uu[2:])) + 1
    imax = np.flatnonzero((uu[1:-1] > uu[:-2]) & (uu[1:-1] >= uu[2:])) + 1
    if imin.size == 0:
        raise ModelError("final potential has no bound well")
    imax = imax[imax > imin[0]]
    edges = np.concatenate([[0.0], zz[imax], [np.inf]])
    barriers = np.concatenate([[uu[: imin[0] + 1].max()], uu[imax], [0.0]])
    return WellMap(edges, barriers, zz[imin])


def classify(sc: TransferScenario, z, v, alive, strength: float, wmap: WellMap | None = None):
    """Well index (1-based) of each atom, or LOST if unbound or dead."""
    wmap = wmap or well_map(sc, strength)
    z = np.asarray(z)
    v = np.asarray(v)
    out = np.full(z.size, LOST, dtype=np.int64)
    m = np.asarray(alive, bool)
    e = 0.5 * CS_MASS_UK * v[m] ** 2 + sc.potential(z[m], strength)
    w = np.searchsorted(wmap.edges, z[m])
    w = np.clip(w, 1, wmap.edges.size - 1)
    bar = np.minimum(wmap.barriers[w - 1], wmap.barriers[w])
    out[m] = np.where(e < bar, w, LOST)
    return out


def _initial_states(sc: TransferScenario, seed: int | None, trials, strength0: float, rng=None):
    """Thermal start for each trial; trial i uses stream (STREAM_MC, i) unless rng is given."""
    zr = sc.rayleigh_range
    lo, hi = sc.focus - 3 * zr, sc.focus + 3 * zr

    def pot(x):
        return sc.potential(x, strength0)

    zg = np.linspace(lo, hi, 4001)
    ug = pot(zg)
    i0 = int(np.argmin(ug))
    u_min = float(ug[i0])
    n = len(trials)
    if sc.temperature == 0.0:
        return np.full(n, zg[i0]), np.zeros(n)
    if -u_min < sc.temperature:
        raise TrapTooShallow(f"well depth {-u_min:.4g} uK is below k_B T = {sc.temperature:.4g} uK")
    zs = np.empty(n)
    vs = np.empty(n)
    for j, t in enumerate(trials):
        g = rng if rng is not None else make_rng(seed, (STREAM_MC, int(t)))
        z, v = _rejection(sc.temperature, pot, lo, hi, u_min, 0.0, g, 1, CS_MASS_UK, 200_000)
        zs[j], vs[j] = z[0], v[0]
    return zs, vs


def simulate_transfer(sc: TransferScenario, rng: np.random.Generator) -> int:
    """One trial: final well index (1 = z1) or LOST."""
    s_tab, wall = sc.ramp()
    z0, v0 = _initial_states(sc, None, [0], s_tab[0], rng=rng)
    z, v, alive = integrate(sc, z0, v0, s_tab, wall)
    return int(classify(sc, z, v, alive, s_tab[-1])[0])


def simulate_trials(sc: TransferScenario, seed: int, *, threads: int = 0,
                    chunk: int = 500) -> AtomEnsemble:
    """Run ``sc.n_trials`` trials; trial i draws only from stream (STREAM_MC, i).

    Results depend on neither ``threads`` nor ``chunk``: each trial is
    independent and outputs are stored by trial index.
    """
    s_tab, wall = sc.ramp()
    n = sc.n_trials
    z0, v0 = _initial_states(sc, seed, range(n), s_tab[0])
    zf, u0, rabs, phi, k, zr = _kernel_args(sc)
    z = z0.copy()
    v = v0.copy()
    alive = np.empty(n, dtype=bool)

    def work(lo):
        hi = min(n, lo + chunk)
        zc, vc = z[lo:hi].copy(), v[lo:hi].copy()
        al = _integrate(zc, vc, zf, u0, rabs, phi, k, zr, s_tab, wall, sc.timestep,
                        zf + sc.window, CS_MASS_UK)
        z[lo:hi], v[lo:hi], alive[lo:hi] = zc, vc, al

    starts = range(0, n, chunk)
    workers = threads if threads > 0 else (os.cpu_count() or 1)
    if workers == 1:
        for lo in starts:
            work(lo)
    else:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            list(ex.map(work, starts))

    wells = classify(sc, z, v, alive, s_tab[-1])
    energy = 0.5 * CS_MASS_UK * v**2 + sc.potential(z, s_tab[-1])
    pos = np.zeros((n, 3))
    pos[:, 2] = z
    return AtomEnsemble(np.arange(n), pos, energy, wells, wells != LOST)


def loading_distribution(sc: TransferScenario, seed: int, *, threads: int = 0,
                         check_timestep: bool = True) -> LoadingDistribution:
    if sc.n_trials < 100:
        raise ModelError("loading_distribution needs n_trials >= 100")
    if check_timestep:
        validate_timestep(sc)
    ens = simulate_trials(sc, seed, threads=threads)
    vals, cnt = np.unique(ens.well_index, return_counts=True)
    counts = {int(a): int(b) for a, b in zip(vals, cnt)}
    return LoadingDistribution(counts, sc.n_trials,
                               {"focal_offset_nm": sc.focal_offset, "seed": seed})


def energy_drift(sc: TransferScenario, n_steps: int = 20000, strength: float = 1.0,
                 kinetic: float | None = None) -> float:
    """Max |E(t) - E(0)| / well depth for a probe atom in the static lattice.

    The probe starts at the bottom of well 1 with kinetic energy ``kinetic``
    (default 3 k_B T, or 10 uK at T = 0).
    """
    wm = well_map(sc, strength)
    z0 = float(wm.minima[0])
    u_min = float(sc.potential(z0, strength))
    depth = float(min(wm.barriers[0], wm.barriers[1])) - u_min
    ke = kinetic if kinetic is not None else max(3.0 * sc.temperature, 10.0)
    ke = min(ke, 0.5 * depth)
    v0 = math.sqrt(2.0 * ke / CS_MASS_UK)
    s_tab = np.full(n_steps + 1, strength)
    wall = np.zeros(n_steps + 1, dtype=bool)
    zf, u0, rabs, phi, k, zr = _kernel_args(sc)
    e0 = ke + u_min
    worst = 0.0
    z = np.array([z0])
    v = np.array([v0])
    block = 100
    for _ in range(n_steps // block):
        _integrate(z, v, zf, u0, rabs, phi, k, zr, s_tab[: block + 1], wall[: block + 1],
                   sc.timestep, zf + sc.window, CS_MASS_UK)
        e = 0.5 * CS_MASS_UK * v[0] ** 2 + float(sc.potential(z[0], strength))
        worst = max(worst, abs(e - e0))
    return worst / depth


def validate_timestep(sc: TransferScenario, tol: float = ENERGY_TOL) -> float:
    drift = energy_drift(sc)
    if drift >= tol:
        raise ModelError(
            f"timestep {sc.timestep} us too large: energy drift {drift:.2e} of well depth "
            f"exceeds {tol:.0e}")
    return drift


def sweep_focal_offset(sc: TransferScenario, offsets_nm, seed: int, *, threads: int = 0):
    """Loading distribution at each focal offset (same trial streams throughout)."""
    out = []
    for off in offsets_nm:
        out.append((float(off), loading_distribution(replace(sc, focal_offset=float(off)),
                                                     seed, threads=threads)))
    return out


def site_focal_offset(base_nm: float, tilt_mrad: float, x_um: float) -> float:
    """Focal offset seen at lateral position x on a tilted device (1 mrad * 1 um = 1 nm)."""
    return base_nm + tilt_mrad * x_um


def write_sweep_csv(rows, path, k: int = 3) -> None:
    names = [f"w_z{j}" for j in range(1, k + 1)] + [f"w_z{k + 1}plus", "w_lost"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["offset_nm"] + names + [f"stderr_{n[2:]}" for n in names])
        for off, dist in rows:
            w.writerow([f"{off:.6g}"] + [f"{x:.6f}" for x in dist.weights_row(k)]
                       + [f"{x:.6f}" for x in dist.stderr_row(k)])
