"""Blow-out survival spectra, lattice-site mixtures, two-photon imaging map and lifetimes."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares, minimize
from scipy.stats import norm

from .core import ModelError, TwoPhotonParams
from .optics import magic_d2_shift

HYPERFINE_F4_OFFSET = -251.0  # MHz, 6P3/2 F'=4 relative to F'=5
LOCATIONS = ("LOADING", "BETWEEN", "ON_DEVICE")


def lorentzian(x, center, fwhm):
    """Unit-peak Lorentzian."""
    hw2 = (0.5 * fwhm) ** 2
    return hw2 / ((np.asarray(x, dtype=float) - center) ** 2 + hw2)


@dataclass
class SurvivalCurve:
    detunings: np.ndarray  # MHz
    survival: np.ndarray
    site_index: int = 0
    location: str = "LOADING"

    def __post_init__(self):
        self.detunings = np.asarray(self.detunings, dtype=float)
        self.survival = np.asarray(self.survival, dtype=float)
        if self.detunings.shape != self.survival.shape or self.detunings.ndim != 1:
            raise ModelError("detunings and survival must be 1-D arrays of equal length")
        if np.any(np.diff(self.detunings) <= 0):
            raise ModelError("detunings must be strictly increasing")
        if np.any((self.survival < 0) | (self.survival > 1)):
            raise ModelError("survival values must lie in [0, 1]")
        if self.location not in LOCATIONS:
            raise ModelError(f"location must be one of {', '.join(LOCATIONS)}")


def blowout_survival(detuning, center, width, depth=1.0, floor=0.0):
    """Inverted Lorentzian dip; ``width`` is the FWHM."""
    if width <= 0:
        raise ModelError("width must be > 0")
    s = floor + (1.0 - floor) * (1.0 - depth * lorentzian(detuning, center, width))
    return np.clip(s, 0.0, 1.0)


@dataclass(frozen=True)
class MixtureModel:
    weights: tuple[float, ...]
    centers: tuple[float, ...]
    width: float
    floor: float = 0.0
    depth: float = 1.0

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if len(self.weights) != len(self.centers):
            raise ModelError("weights and centers differ in length")
        if np.any(w < 0) or w.sum() > 1 + 1e-12:
            raise ModelError("weights must be >= 0 with sum <= 1")
        mags = np.abs(self.centers)
        if np.any(np.diff(mags) >= 0):
            raise ModelError("centers must be ordered by decreasing magnitude")
        if self.width <= 0:
            raise ModelError("width must be > 0")


def _dip_matrix(detuning, centers, width, depth, floor):
    """Columns: 1 - single-component survival."""
    x = np.atleast_1d(np.asarray(detuning, dtype=float))
    return np.stack([1.0 - blowout_survival(x, c, width, depth, floor) for c in centers], axis=1)


def mixture_survival(detuning, model: MixtureModel):
    """Weighted blow-out curves; the untrapped remainder always survives."""
    d = _dip_matrix(detuning, model.centers, model.width, model.depth, model.floor)
    out = 1.0 - d @ np.asarray(model.weights, dtype=float)
    return out if np.ndim(detuning) else float(out[0])


@dataclass
class BlowoutFit:
    center: float
    width: float
    depth: float
    floor: float
    stderr: dict
    residual_norm: float
    has_dip: bool = True

    def as_dict(self) -> dict:
        return {"center_mhz": self.center, "width_mhz": self.width, "depth": self.depth,
                "floor": self.floor, "stderr": self.stderr,
                "residual_norm": self.residual_norm, "has_dip": self.has_dip}


def _no_dip(curve: SurvivalCurve, floor: float) -> BlowoutFit:
    nan = float("nan")
    res = float(np.linalg.norm(curve.survival - curve.survival.mean()))
    return BlowoutFit(nan, nan, 0.0, floor, {"center": nan, "width": nan, "depth": nan},
                      res, has_dip=False)


def fit_blowout(curve: SurvivalCurve, *, floor: float = 0.0, max_nfev: int = 2000,
                min_significance: float = 3.0) -> BlowoutFit:
    """Least-squares Lorentzian dip fit with covariance errors.

    Far from resonance the model tends to 1 for any floor, and floor enters the
    dip only through (1 - floor) * depth, so floor is held at the given value
    and (center, width, depth) are fitted.
    """
    x, y = curve.detunings, curve.survival
    if x.size < 8:
        raise ModelError("need at least 8 detuning points")
    if np.ptp(y) < 1e-9:
        return _no_dip(curve, floor)

    i0 = int(np.argmin(y))
    dip0 = 1.0 - y[i0]
    half = y < 1.0 - 0.5 * dip0
    span = x[-1] - x[0]
    w0 = max(np.count_nonzero(half) * span / max(x.size - 1, 1), span / x.size)
    a0 = min(max(dip0 / max(1.0 - floor, 1e-9), 1e-3), 1.0)

    def resid(p):
        c, w, a = p
        return floor + (1.0 - floor) * (1.0 - a * lorentzian(x, c, w)) - y

    lo = [x[0] - span, span * 1e-4, 0.0]
    hi = [x[-1] + span, 10.0 * span, 1.0]
    sol = least_squares(resid, [x[i0], w0, a0], bounds=(lo, hi), max_nfev=max_nfev,
                        x_scale=[w0, w0, 0.1], xtol=1e-12, ftol=1e-12, gtol=1e-12)
    if sol.status <= 0:
        raise ModelError(f"blow-out fit did not converge: {sol.message}")
    c, w, a = sol.x
    dof = max(x.size - 3, 1)
    s2 = float(sol.fun @ sol.fun) / dof
    jtj = sol.jac.T @ sol.jac
    try:
        cov = np.linalg.inv(jtj) * s2
        err = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    except np.linalg.LinAlgError:
        err = np.full(3, np.inf)
    censored = (y >= 1.0) | (y <= 0.0)
    if np.any(censored) and s2 > 0:
        (c, w, a), err = _censored_refit(x, y, floor, (c, w, a, 0.5 * math.log(s2)),
                                         (lo, hi))
    fit = BlowoutFit(float(c), float(w), float(a), floor,
                     {"center": float(err[0]), "width": float(err[1]), "depth": float(err[2])},
                     float(np.linalg.norm(sol.fun)))
    if not (a > 0 and a > min_significance * err[2] and x[0] <= c <= x[-1]):
        return _no_dip(curve, floor)
    return fit


def _censored_refit(x, y, floor, p0, bounds):
    """Gaussian likelihood where points recorded at 0 or 1 count as censored.

    Survival estimates cannot leave [0, 1], so noisy points near full survival
    pile up at 1; treating them as exact biases the least-squares fit. Returns
    ((center, width, depth), standard errors from the observed information).
    """
    up, dn = y >= 1.0, y <= 0.0
    mid = ~(up | dn)

    def nll(q):
        c, w, a, ls = q
        sd = math.exp(ls)
        mu = floor + (1.0 - floor) * (1.0 - a * lorentzian(x, c, w))
        return -(norm.logpdf(y[mid], mu[mid], sd).sum() + norm.logsf((1.0 - mu[up]) / sd).sum()
                 + norm.logcdf(-mu[dn] / sd).sum())

    lo, hi = bounds
    box = list(zip(lo, hi)) + [(p0[3] - 10.0, p0[3] + 10.0)]
    sol = minimize(nll, p0, method="L-BFGS-B", bounds=box,
                   options={"ftol": 1e-15, "gtol": 1e-10, "maxiter": 5000})
    q = sol.x
    step = np.array([1e-3 * q[1], 1e-3 * q[1], 1e-4, 1e-3])
    hess = np.empty((4, 4))
    eye = np.diag(step)
    for i in range(4):
        for j in range(i, 4):
            hess[i, j] = hess[j, i] = (nll(q + eye[i] + eye[j]) - nll(q + eye[i] - eye[j])
                                       - nll(q - eye[i] + eye[j]) + nll(q - eye[i] - eye[j])
                                       ) / (4.0 * step[i] * step[j])
    try:
        err = np.sqrt(np.clip(np.diag(np.linalg.inv(hess))[:3], 0.0, None))
    except np.linalg.LinAlgError:
        err = np.full(3, np.inf)
    return q[:3], err


@dataclass
class MixtureFit:
    weights: np.ndarray
    stderr: np.ndarray
    residual_norm: float
    identifiable: bool = True
    active: tuple = field(default_factory=tuple)

    @property
    def lost(self) -> float:
        return float(1.0 - np.sum(self.weights))


def _constrained_lsq(a: np.ndarray, b: np.ndarray):
    """min |a w - b|^2 s.t. w >= 0, sum w <= 1, by exhaustive active-set search.

    The problem is convex, so its minimiser is the unconstrained minimiser on
    the affine hull of some face. Enumerating every face and keeping the best
    feasible candidate is exact and cheap for a handful of components.
    """
    m = a.shape[1]
    best = None
    for n_zero in range(m + 1):
        for zero in itertools.combinations(range(m), n_zero):
            free = [j for j in range(m) if j not in zero]
            for on_simplex in (False, True):
                w = np.zeros(m)
                if free:
                    af = a[:, free]
                    if on_simplex:
                        # w_free = w_last-eliminated: sum w_free = 1
                        if len(free) == 1:
                            w[free] = 1.0
                        else:
                            ref = af[:, -1]
                            red = af[:, :-1] - ref[:, None]
                            sol, *_ = np.linalg.lstsq(red, b - ref, rcond=None)
                            w[free[:-1]] = sol
                            w[free[-1]] = 1.0 - sol.sum()
                    else:
                        sol, *_ = np.linalg.lstsq(af, b, rcond=None)
                        w[free] = sol
                elif on_simplex:
                    continue
                if np.any(w < -1e-12) or w.sum() > 1 + 1e-12:
                    continue
                w = np.clip(w, 0.0, None)
                r = a @ w - b
                cost = float(r @ r)
                if best is None or cost < best[0] - 1e-15:
                    best = (cost, w, zero, on_simplex)
    return best


def fit_mixture(curve: SurvivalCurve, centers, width: float, *, depth: float = 1.0,
                floor: float = 0.0) -> MixtureFit:
    """Weights of fixed-centre blow-out components (w_i >= 0, sum w_i <= 1)."""
    centers = tuple(float(c) for c in centers)
    m = len(centers)
    for i, j in itertools.combinations(range(m), 2):
        if abs(centers[i] - centers[j]) < 0.5 * width:
            nan = np.full(m, np.nan)
            return MixtureFit(nan, nan, float("nan"), identifiable=False)
    a = _dip_matrix(curve.detunings, centers, width, depth, floor)
    b = 1.0 - curve.survival
    cost, w, zero, on_simplex = _constrained_lsq(a, b)
    free = [j for j in range(m) if j not in zero]
    dof = max(b.size - len(free) + (1 if on_simplex else 0), 1)
    s2 = cost / dof
    err = np.zeros(m)
    if free:
        cov = np.linalg.pinv(a[:, free].T @ a[:, free]) * s2
        err[free] = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    active = tuple(zero) + (("sum",) if on_simplex else ())
    return MixtureFit(w, err, math.sqrt(cost), True, active)


@dataclass(frozen=True)
class DetuningPair:
    delta_852: float  # MHz from 6S1/2 F=4 -> 6P3/2 F'=5
    delta_1470: float  # MHz from 6P3/2 F'=5 -> 7S1/2 F''=4

    @property
    def hyperfine_offset(self) -> float:
        return HYPERFINE_F4_OFFSET

    @property
    def two_photon(self) -> float:
        return self.delta_852 + self.delta_1470


def two_photon_response(d852, d1470, params: TwoPhotonParams, trap_ratio: float = 1.0):
    """(signal, survival, detected) for the two-photon imaging scheme.

    Signal follows the two-photon resonance, blue shifted by the configured
    light shift. Heating loss is resonant with the single-photon lines
    F=4 -> F'=5 and F'=4, which sit at their bare positions because the trap is
    magic for the 852 nm transition. Detected photons are signal * survival.
    """
    d852 = np.asarray(d852, dtype=float)
    d1470 = np.asarray(d1470, dtype=float)
    shift = magic_d2_shift(trap_ratio)
    signal = params.amplitude * lorentzian(d852 + d1470, params.light_shift,
                                           params.gamma_two_photon)
    loss = params.loss_rate * (lorentzian(d852, shift, params.gamma_single)
                               + lorentzian(d852, HYPERFINE_F4_OFFSET + shift,
                                            params.gamma_single))
    survival = np.exp(-loss * params.exposure)
    return signal, survival, signal * survival


def two_photon_map(d852_grid, d1470_grid, params: TwoPhotonParams):
    """Detected signal on a grid; rows follow d1470, columns d852."""
    x, y = np.meshgrid(np.asarray(d852_grid, float), np.asarray(d1470_grid, float))
    return two_photon_response(x, y, params)[2]


@dataclass
class LifetimeData:
    hold_times: np.ndarray  # s
    n_atoms: np.ndarray
    survivors: np.ndarray

    @property
    def probability(self) -> np.ndarray:
        return self.survivors / self.n_atoms


def lifetime_curve(hold_times, tau: float, rng: np.random.Generator, n_atoms: int = 500,
                   p0: float = 1.0) -> LifetimeData:
    """Binomial survivor counts for exp(-t/tau) decay."""
    t = np.asarray(hold_times, dtype=float)
    if np.any(t < 0):
        raise ModelError("hold times must be >= 0")
    if tau <= 0:
        raise ModelError("tau must be > 0")
    n = np.full(t.shape, int(n_atoms))
    k = rng.binomial(n, p0 * np.exp(-t / tau))
    return LifetimeData(t, n, k)


@dataclass
class LifetimeFit:
    tau: float
    tau_err: float
    amplitude: float
    ok: bool = True
    message: str = ""


def fit_lifetime(data: LifetimeData) -> LifetimeFit:
    """Weighted linear fit of log survival: ln p = ln A - t / tau.

    Zero counts are replaced by half a count; weights use the binomial variance
    of ln p, n p / (1 - p), with p capped so full survival keeps a finite weight.
    """
    k = np.asarray(data.survivors, dtype=float)
    n = np.asarray(data.n_atoms, dtype=float)
    t = np.asarray(data.hold_times, dtype=float)
    if not np.any(k > 0):
        return LifetimeFit(float("nan"), float("nan"), float("nan"), False, "all-zero counts")
    if np.unique(t).size < 2:
        return LifetimeFit(float("nan"), float("nan"), float("nan"), False,
                           "need at least two distinct hold times")
    p = np.maximum(k, 0.5) / n
    q = np.maximum(1.0 - p, 0.5 / n)
    wts = n * p / q
    y = np.log(p)
    x = np.stack([np.ones_like(t), t], axis=1)
    xtw = x.T * wts
    cov = np.linalg.inv(xtw @ x)
    a, b = cov @ (xtw @ y)
    if b >= 0:
        return LifetimeFit(float("inf"), float("nan"), float(np.exp(a)), False,
                           "no decay in data")
    tau = -1.0 / b
    return LifetimeFit(float(tau), float(math.sqrt(cov[1, 1]) / b**2), float(np.exp(a)))
