"""Rearrangement planning: drop, compress, and route a tweezer row onto devices.

Geometry: devices run along X (length ``device_length``, free end at x = 0)
and repeat along Y every ``device_pitch``; device j is centred at y = j * pitch.
The loading row sits at ``loading_region_offset`` with tone 0 of the row axis
there and positions growing with frequency at ``aod_scale`` um/MHz.
"""
from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import binom

from .core import (STREAM_PIPELINE, ChipGeometry, Config, ModelError, PlannerParams,
                   RateTable, TweezerArray, make_rng)

HOLD, CHIRP, DROP = "HOLD", "CHIRP", "DROP"
ONE_PER_DEVICE, N_ON_ONE_DEVICE = "ONE_PER_DEVICE", "N_ON_ONE_DEVICE"


class PlanError(ModelError):
    pass


@dataclass(frozen=True)
class ChirpProfile:
    """Symmetric piecewise-quadratic sweep with zero slope at both ends."""
    f_start: float
    f_end: float
    duration: float  # ms

    def __post_init__(self):
        if self.duration <= 0:
            raise PlanError("chirp duration must be > 0")

    @property
    def delta(self) -> float:
        return self.f_end - self.f_start

    @property
    def peak_slew(self) -> float:
        return 2.0 * abs(self.delta) / self.duration

    def __call__(self, t):
        u = np.clip(np.asarray(t, dtype=float) / self.duration, 0.0, 1.0)
        first = self.f_start + 2.0 * self.delta * u * u
        second = self.f_end - 2.0 * self.delta * (1.0 - u) ** 2
        return np.where(u <= 0.5, first, second)

    def rate(self, t):
        """df/dt in MHz/ms."""
        u = np.clip(np.asarray(t, dtype=float) / self.duration, 0.0, 1.0)
        k = 4.0 * self.delta / self.duration
        return np.where(u <= 0.5, k * u, k * (1.0 - u))


def chirp(f_start: float, f_end: float, duration: float) -> ChirpProfile:
    return ChirpProfile(float(f_start), float(f_end), float(duration))


@dataclass
class Segment:
    kind: str
    axis: str
    f0: float
    f1: float
    duration: float  # ms

    def freq(self, t):
        if self.kind == CHIRP:
            return chirp(self.f0, self.f1, self.duration)(t)
        return np.full(np.shape(t), self.f0, dtype=float)

    def as_dict(self) -> dict:
        return {"kind": self.kind, "axis": self.axis, "f0_mhz": round(self.f0, 9),
                "f1_mhz": round(self.f1, 9), "t_ms": round(self.duration, 9)}


@dataclass
class ToneTimeline:
    tone_id: str
    axis: str
    segments: list[Segment] = field(default_factory=list)

    @property
    def dropped(self) -> bool:
        return bool(self.segments) and self.segments[-1].kind == DROP

    @property
    def duration(self) -> float:
        return sum(s.duration for s in self.segments)

    @property
    def final_freq(self) -> float:
        return self.segments[-1].f1

    def add(self, seg: Segment) -> None:
        if self.dropped:
            raise PlanError(f"tone {self.tone_id} already dropped")
        if self.segments and abs(seg.f0 - self.final_freq) > 1e-9:
            raise PlanError(f"frequency jump on tone {self.tone_id}")
        self.segments.append(seg)

    def freq(self, t):
        """Frequency at times t (NaN once dropped)."""
        t = np.asarray(t, dtype=float)
        out = np.full(t.shape, np.nan)
        start = 0.0
        for seg in self.segments:
            if seg.kind == DROP:
                out[t >= start] = np.nan
                return out
            end = start + seg.duration
            m = (t >= start) & (t <= end)
            out[m] = seg.freq(t[m] - start)
            start = end
        out[t > start] = self.final_freq if self.segments else np.nan
        return out


@dataclass
class TrajectoryPlan:
    tones: list[ToneTimeline]
    report: dict = field(default_factory=dict)

    @property
    def duration(self) -> float:
        return max((t.duration for t in self.tones), default=0.0)

    @property
    def motion_free(self) -> bool:
        return all(s.kind != CHIRP for t in self.tones for s in t.segments)

    def tone(self, tone_id: str) -> ToneTimeline:
        for t in self.tones:
            if t.tone_id == tone_id:
                return t
        raise KeyError(tone_id)

    def live(self, axis: str | None = None) -> list[ToneTimeline]:
        return [t for t in self.tones if not t.dropped and (axis is None or t.axis == axis)]

    def to_json(self) -> list[dict]:
        return [{"tone_id": t.tone_id, "segments": [s.as_dict() for s in t.segments]}
                for t in self.tones]

    def dumps(self) -> str:
        return json.dumps({"tones": self.to_json(), "duration_ms": round(self.duration, 9),
                           "report": self.report}, indent=2, sort_keys=True)

    def phase(self, moves: dict[str, tuple[str, float, float]], t_phase: float) -> None:
        """Append one synchronous phase: tones in ``moves`` get (kind, f0, f1), other live tones hold."""
        for t in self.live():
            if t.tone_id in moves:
                kind, f0, f1 = moves[t.tone_id]
                t.add(Segment(kind, t.axis, f0, f1, t_phase))
            else:
                t.add(Segment(HOLD, t.axis, t.final_freq, t.final_freq, t_phase))


def compression_targets(occupancy, tones, target_pitch: float, pp: PlannerParams,
                        capacity: int | None = None) -> list[float]:
    """Rank-matched target frequency for each occupied tone.

    Slots sit at tones[0] + m * target_pitch for m = 0 .. capacity-1 (capacity
    defaults to the tone count). The block starts at slot 0 ("left"), is centred
    on the row ("center") or starts at slot ``first_device`` ("device").
    """
    n = sum(bool(o) for o in occupancy)
    cap = len(tones) if capacity is None else capacity
    if pp.alignment == "left":
        start = 0
    elif pp.alignment == "center":
        start = max((len(tones) - n) // 2, 0)
    else:
        start = pp.first_device
    if start + n > cap:
        raise PlanError(f"overflow: {n} atoms for {max(cap - start, 0)} target slots")
    return [tones[0] + (start + i) * target_pitch for i in range(n)]


def plan_compression(occupancy, tones, target_pitch: float, pp: PlannerParams, *,
                     axis: str = "Y", capacity: int | None = None,
                     drop_ramp: float = 0.0) -> TrajectoryPlan:
    """Drop empty tweezers and chirp the rest into a contiguous block.

    The i-th surviving atom goes to the i-th slot. All moving tones share one
    window of ``pp.compression_time``; if nothing moves the holds last 0 ms.
    """
    occ = [bool(o) for o in occupancy]
    if len(occ) != len(tones):
        raise PlanError(f"occupancy has {len(occ)} entries for {len(tones)} tones")
    targets = compression_targets(occ, tones, target_pitch, pp, capacity)
    plan = TrajectoryPlan([ToneTimeline(f"{axis}{i}", axis) for i in range(len(tones))])
    moves = {}
    it = iter(targets)
    for i, (o, f) in enumerate(zip(occ, tones)):
        if not o:
            plan.tones[i].add(Segment(DROP, axis, f, f, drop_ramp))
        else:
            g = next(it)
            moves[plan.tones[i].tone_id] = (CHIRP if abs(g - f) > 1e-12 else HOLD, f, g)
    moving = any(k == CHIRP for k, _, _ in moves.values())
    t_c = pp.compression_time if moving else 0.0
    for t in plan.tones:
        if t.tone_id in moves:
            kind, f0, f1 = moves[t.tone_id]
            t.add(Segment(kind, axis, f0, f1, t_c))
    check_slew(plan, pp.max_slew)
    plan.report = {"atoms": sum(occ), "dropped": len(occ) - sum(occ),
                   "compression_ms": t_c, "targets_mhz": [round(g, 9) for g in targets]}
    return plan


def check_slew(plan: TrajectoryPlan, max_slew: float) -> float:
    worst = 0.0
    for t in plan.tones:
        for s in t.segments:
            if s.kind == CHIRP:
                worst = max(worst, chirp(s.f0, s.f1, s.duration).peak_slew)
    if worst > max_slew + 1e-12:
        raise PlanError(f"peak slew {worst:.4g} MHz/ms exceeds limit {max_slew:.4g} MHz/ms")
    return worst


def crossing_report(plan: TrajectoryPlan, dt: float = 1e-3) -> dict:
    """Minimum same-axis separation (MHz) over a fine time grid and order violations."""
    total = plan.duration
    n = int(math.ceil(total / dt)) + 1 if total > 0 else 1
    t = np.linspace(0.0, total, n)
    out = {"min_separation_mhz": math.inf, "order_violations": 0, "samples": n}
    for axis in ("X", "Y"):
        rows = [tl for tl in plan.tones if tl.axis == axis]
        if len(rows) < 2:
            continue
        f = np.stack([tl.freq(t) for tl in rows])
        live = ~np.isnan(f)
        # the live set only changes at drops, so group columns by it
        codes = (live.astype(np.int64) << np.arange(len(rows))[:, None]).sum(axis=0)
        for code in np.unique(codes):
            pat = live[:, np.argmax(codes == code)]
            if pat.sum() < 2:
                continue
            d = np.diff(f[pat][:, codes == code], axis=0)
            out["min_separation_mhz"] = min(out["min_separation_mhz"], float(d.min()))
            out["order_violations"] += int(np.count_nonzero(d <= 0))
    return out


def _to_freq(pos: float, origin: float, f_ref: float, scale: float) -> float:
    return f_ref + (pos - origin) / scale


def plan_rearrangement(occupancy, cfg: Config, mode: str = ONE_PER_DEVICE, k: int = 3, *,
                       approach_speed: float | None = None) -> TrajectoryPlan:
    """Compression followed by the device approach (see plan_to_devices)."""
    geom, tw, pp = cfg.chip, cfg.tweezer, cfg.planner
    speed = cfg.mc.approach_speed if approach_speed is None else approach_speed
    occ = [bool(o) for o in occupancy]
    if mode == ONE_PER_DEVICE:
        tones, axis = tw.tones_y, "Y"
        pitch_mhz = geom.device_pitch / tw.aod_scale
        cap = geom.n_devices
    elif mode == N_ON_ONE_DEVICE:
        tones, axis = tw.tones_x, "X"
        pitch_mhz = pp.intra_device_spacing / tw.aod_scale
        cap = None
        check_capacity(geom, pp, k)
    else:
        raise PlanError(f"unknown mode {mode!r}")
    plan = plan_compression(occ, tones, pitch_mhz, pp, axis=axis, capacity=cap,
                            drop_ramp=pp.drop_ramp)
    return plan_to_devices(plan, geom, tw, pp, mode, k, speed)


def device_capacity(geom: ChipGeometry, pp: PlannerParams) -> int:
    """Sites that fit along one device at the intra-device spacing."""
    return int(math.floor(geom.device_length / pp.intra_device_spacing + 1e-9))


def check_capacity(geom: ChipGeometry, pp: PlannerParams, k: int) -> None:
    cap = device_capacity(geom, pp)
    if k < 1 or k > cap:
        raise PlanError(f"infeasible: {k} atoms per device exceeds capacity {cap}")
    if not 0 <= pp.target_device < geom.n_devices:
        raise PlanError(f"target device {pp.target_device} outside 0..{geom.n_devices - 1}")


def _move_time(df_max: float, scale: float, speed: float) -> float:
    return abs(df_max) * scale / speed


def plan_to_devices(plan: TrajectoryPlan, geom: ChipGeometry, tw: TweezerArray,
                    pp: PlannerParams, mode: str, k: int, approach_speed: float
                    ) -> TrajectoryPlan:
    """Append the X translation between devices and the Y approach onto them.

    ONE_PER_DEVICE: the row lies along Y at between-device positions; the single
    X tone carries it to mid-device, then every Y tone moves half a pitch onto
    its device. N_ON_ONE_DEVICE(k): the row lies along X; the single Y tone first
    aligns with the gap beside the target device, the X tones spread to k sites
    along the device (surplus atoms park at negative x, off the device), and the
    Y tone then moves onto the device.
    """
    scale = tw.aod_scale
    x0, y0 = geom.loading_region_offset
    live_row = [t for t in plan.live() if t.axis in ("X", "Y")]
    n_atoms = len(live_row)
    gap = 0.5 * (geom.device_pitch - geom.device_width)
    if gap < pp.clearance:
        raise PlanError(f"clearance {pp.clearance} um exceeds gap {gap:.3g} um beside devices")
    half = 0.5 * geom.device_pitch

    if mode == ONE_PER_DEVICE:
        cross = ToneTimeline("X0", "X", [])
        f_cross = tw.tones_x[0]
        if n_atoms == 0:
            cross.add(Segment(DROP, "X", f_cross, f_cross, 0.0))
            plan.tones.append(cross)
            plan.report.update({"mode": mode, "targets": []})
            return plan
        start = plan.duration
        cross.add(Segment(HOLD, "X", f_cross, f_cross, start))
        plan.tones.append(cross)
        # after compression every atom sits beside a device: y = j*pitch + pitch/2
        devices = []
        for t in live_row:
            y = y0 + (t.final_freq - tw.tones_y[0]) * scale
            j = (y - half) / geom.device_pitch
            if abs(j - round(j)) > 1e-6 or not 0 <= round(j) < geom.n_devices:
                raise PlanError(f"tone {t.tone_id} at y={y:.4g} um is not beside a device")
            devices.append(int(round(j)))
        if len(set(devices)) != len(devices):
            raise PlanError("two atoms assigned to one device")
        fx = _to_freq(0.5 * geom.device_length, x0, f_cross, scale)
        tx = _move_time(fx - f_cross, scale, pp.x_speed)
        plan.phase({"X0": (CHIRP, f_cross, fx)}, tx)
        ty = _move_time(half / scale, scale, approach_speed)
        plan.phase({t.tone_id: (CHIRP, t.final_freq, t.final_freq - half / scale)
                               for t in live_row}, ty)
        targets = [[0.5 * geom.device_length, j * geom.device_pitch] for j in devices]
        plan.report.update({"mode": mode, "devices": devices, "x_move_ms": tx,
                            "y_move_ms": ty, "targets_um": targets,
                            "transit_clearance_um": gap})
    elif mode == N_ON_ONE_DEVICE:
        check_capacity(geom, pp, k)
        cross = ToneTimeline("Y0", "Y", [])
        f_cross = tw.tones_y[0]
        if n_atoms == 0:
            cross.add(Segment(DROP, "Y", f_cross, f_cross, 0.0))
            plan.tones.append(cross)
            plan.report.update({"mode": mode, "k": k, "targets": []})
            return plan
        start = plan.duration
        cross.add(Segment(HOLD, "Y", f_cross, f_cross, start))
        plan.tones.append(cross)
        jt = pp.target_device
        y_gap = jt * geom.device_pitch + half
        fy_gap = _to_freq(y_gap, y0, f_cross, scale)
        if abs(fy_gap - f_cross) > 1e-12:
            plan.phase({"Y0": (CHIRP, f_cross, fy_gap)},
                       _move_time(fy_gap - f_cross, scale, pp.x_speed))
        n_on = min(k, n_atoms)
        n_park = n_atoms - n_on
        sp = pp.intra_device_spacing
        xc = 0.5 * geom.device_length
        xs = [pp.park_x - (n_park - 1 - m) * sp for m in range(n_park)]
        xs += [xc + (i - 0.5 * (n_on - 1)) * sp for i in range(n_on)]
        moves = {}
        df_max = 0.0
        for t, x in zip(live_row, xs):
            fx = _to_freq(x, x0, tw.tones_x[0], scale)
            moves[t.tone_id] = (CHIRP if abs(fx - t.final_freq) > 1e-12 else HOLD,
                                t.final_freq, fx)
            df_max = max(df_max, abs(fx - t.final_freq))
        tx = _move_time(df_max, scale, pp.x_speed)
        plan.phase(moves, tx)
        ty = _move_time(half / scale, scale, approach_speed)
        plan.phase({"Y0": (CHIRP, fy_gap, fy_gap - half / scale)}, ty)
        plan.report.update({"mode": mode, "k": k, "device": jt, "on_device": n_on,
                            "parked": n_park, "x_move_ms": tx, "y_move_ms": ty,
                            "targets_um": [[x, jt * geom.device_pitch] for x in xs],
                            "transit_clearance_um": gap})
    else:
        raise PlanError(f"unknown mode {mode!r}")
    plan.report["max_slew_mhz_per_ms"] = check_slew(plan, pp.max_slew)
    return plan


def binomial_tail(n: int, p: float, k) -> np.ndarray:
    """P(Bin(n, p) >= k)."""
    return binom.sf(np.asarray(k) - 1, n, p)


@dataclass
class PipelineStats:
    n_shots: int
    image1_mean: np.ndarray  # per-site loaded fraction
    raw: np.ndarray  # per-slot fill probability in Image 2
    corrected: np.ndarray
    raw_stderr: np.ndarray
    mean_atoms_image2: float


def _pipeline_shot(rates: RateTable, n: int, device_weight: float, rng):
    loaded = rng.random(n) < rates.load_prob
    n_loaded = int(loaded.sum())
    survive = rng.random(n_loaded) < rates.imaging_survival
    survive &= rng.random(n_loaded) < rates.rearrange_survival
    if device_weight < 1.0:
        survive &= rng.random(n_loaded) < device_weight
    slots = np.zeros(n, dtype=bool)
    slots[:n_loaded] = survive  # order-preserving: i-th loaded atom -> slot i
    return loaded, slots


def simulate_pipeline(rates: RateTable, n_sites: int, n_shots: int, seed: int, *,
                      device_weight: float = 1.0, threads: int = 0) -> PipelineStats:
    """Load -> image -> compress -> move, per shot on stream (STREAM_PIPELINE, shot).

    ``corrected`` removes the first-image loss by inverse probability weighting,
    i.e. divides the raw fill by the imaging survival.
    """
    if not 0.0 <= device_weight <= 1.0:
        raise ModelError("device_weight must lie in [0, 1]")
    loaded = np.zeros((n_shots, n_sites), dtype=bool)
    slots = np.zeros((n_shots, n_sites), dtype=bool)

    def work(rng_range):
        for s in rng_range:
            loaded[s], slots[s] = _pipeline_shot(rates, n_sites, device_weight,
                                                 make_rng(seed, (STREAM_PIPELINE, s)))

    chunk = 1000
    parts = [range(a, min(n_shots, a + chunk)) for a in range(0, n_shots, chunk)]
    workers = threads if threads > 0 else (os.cpu_count() or 1)
    if workers == 1:
        for p in parts:
            work(p)
    else:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            list(ex.map(work, parts))
    raw = slots.mean(axis=0)
    err = np.sqrt(raw * (1 - raw) / n_shots)
    corr = raw / rates.imaging_survival if rates.imaging_survival > 0 else np.full(n_sites, np.nan)
    return PipelineStats(n_shots, loaded.mean(axis=0), raw, corr, err,
                         float(slots.sum(axis=1).mean()))
