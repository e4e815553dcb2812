"""Command-line front end: ``atomforge <subcommand> [options]``.

Every run writes its outputs to --out and a manifest.json recording the command
line, config hash, seed, version, output files and wall time. Exit codes: 0 ok,
2 config or usage error, 3 model or feasibility error, 4 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .core import (DEFAULT_CONFIG, STREAM_AUTOFOCUS, STREAM_IMAGING, STREAM_LIFETIME,
                   AtomforgeError, ConfigError, ModelError, load_config, make_rng)


class RunContext:
    def __init__(self, args):
        self.args = args
        path = Path(args.config) if args.config else DEFAULT_CONFIG
        self.config_path = path
        self.cfg = load_config(path)
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError("invariant violated: seed must satisfy in [0, 2^64)")
            self.cfg = replace(self.cfg, mc=replace(self.cfg.mc, seed=args.seed))
        self.seed = self.cfg.mc.seed
        self.out = Path(args.out)
        self.outputs: list[str] = []
        try:
            self.out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OSError(f"cannot create output directory {self.out}: {exc.strerror}") from None

    def path(self, name: str) -> Path:
        self.outputs.append(name)
        return self.out / name

    def write_text(self, name: str, text: str) -> Path:
        p = self.path(name)
        p.write_text(text)
        return p

    def write_json(self, name: str, obj) -> Path:
        text = json.dumps(_finite(obj), indent=2, sort_keys=True, allow_nan=False)
        return self.write_text(name, text + "\n")

    def write_csv(self, name: str, header, rows) -> Path:
        p = self.path(name)
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
        return p

    def manifest(self, argv, wall: float) -> None:
        data = {
            "command_line": ["atomforge", *argv],
            "config_path": str(self.config_path),
            "config_sha256": hashlib.sha256(self.config_path.read_bytes()).hexdigest(),
            "seed": self.seed,
            "version": __version__,
            "outputs": sorted(set(self.outputs)),
            "wall_time_s": round(wall, 6),
        }
        (self.out / "manifest.json").write_text(json.dumps(data, indent=2) + "\n")


def _finite(o):
    """Plain JSON types, with NaN and infinities written as null."""
    if isinstance(o, dict):
        return {str(k): _finite(v) for k, v in o.items()}
    if isinstance(o, (list, tuple, np.ndarray)):
        return [_finite(v) for v in o]
    if isinstance(o, np.generic):
        o = o.item()
    if isinstance(o, complex):
        return [_finite(o.real), _finite(o.imag)]
    if isinstance(o, float) and not math.isfinite(o):
        return None
    return o


def _fmt(x) -> str:
    return f"{float(x):.10g}"


def _range(spec: str, name: str) -> np.ndarray:
    try:
        a, b, n = spec.split(":")
        return np.linspace(float(a), float(b), int(n))
    except ValueError:
        raise ConfigError(f"bad range for {name}: {spec!r}, expected a:b:n") from None


def _floats(spec: str, name: str) -> list[float]:
    try:
        return [float(v) for v in spec.split(",")]
    except ValueError:
        raise ConfigError(f"bad list for {name}: {spec!r}") from None


def _read_columns(path: str, *names) -> list[np.ndarray]:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror}") from None
    if not rows:
        raise ModelError(f"{path} has no data rows")
    cols = []
    for n in names:
        if n not in rows[0]:
            raise ModelError(f"{path} lacks column {n!r}")
        cols.append(np.array([float(r[n]) for r in rows]))
    return cols


# -- subcommands -------------------------------------------------------------

def cmd_lattice(ctx: RunContext):
    from .optics import lattice_profile
    a = ctx.args
    prof = lattice_profile(ctx.cfg.chip, ctx.cfg.tweezer, a.z_max, a.points,
                           envelope=a.envelope, focal_offset=a.focal_offset)
    prof.to_csv(ctx.path("lattice.csv"))
    r = prof.reflection
    ctx.write_json("maxima.json", {
        "reflection": {"re": r.amplitude.real, "im": r.amplitude.imag,
                       "abs": abs(r.amplitude), "power_reflectance": r.power_reflectance},
        "maxima": [{"z_nm": m.z, "ratio": m.ratio, "depth_uk": m.depth,
                    "stark_shift_mhz": m.ratio * ctx.cfg.tweezer.stark_kappa}
                   for m in prof.maxima]})
    m = prof.maxima[0] if prof.maxima else None
    if m:
        print(f"z1 = {m.z:.3f} nm, ratio = {m.ratio:.6f}")


def cmd_simulate_loading(ctx: RunContext):
    from .montecarlo import TransferScenario, sweep_focal_offset, write_sweep_csv
    a = ctx.args
    over = {}
    if a.trials is not None:
        over["n_trials"] = a.trials
    if a.timestep is not None:
        over["timestep"] = a.timestep
    if a.temperature is not None:
        over["temperature"] = a.temperature
    sc = TransferScenario.from_config(ctx.cfg, **over)
    if a.sweep:
        key, _, spec = a.sweep.partition("=")
        if key != "focal_offset":
            raise ConfigError(f"only focal_offset can be swept, got {key!r}")
        offsets = _range(spec, "focal_offset")
    else:
        offsets = [sc.focal_offset]
    rows = sweep_focal_offset(sc, offsets, ctx.seed, threads=a.threads)
    write_sweep_csv(rows, ctx.path("loading.csv"))
    best = max(rows, key=lambda r: r[1].weight(1))
    print(f"max z1 fraction {best[1].weight(1):.4f} at focal offset {best[0]:g} nm")


def cmd_simulate_imaging(ctx: RunContext):
    from .imaging import (fit_histogram, histogram_table, on_device_parameters,
                          render_frame, write_frame)
    a = ctx.args
    ip = ctx.cfg.imaging
    sig = bg = None
    if a.on_device:
        sig_tot, bg = on_device_parameters(ip.on_device_fidelity, ip.threshold)
        sig = sig_tot - bg
    rng = make_rng(ctx.seed, STREAM_IMAGING)
    sums = []
    for i in range(a.frames):
        occ = rng.random(a.sites) < ctx.cfg.rates.load_prob
        frame, _ = render_frame(occ, ip.exposure, ip, rng, p_loss=a.p_loss, signal=sig,
                                background=bg, seed=ctx.seed)
        if i == 0:
            write_frame(ctx.path("frame_0000.raw"), frame)
            ctx.outputs.append("frame_0000.json")
        sums.append(frame.roi_sums())
    sums = np.concatenate(sums)
    ctx.write_csv("histogram.csv", ["roi_sum", "count"], histogram_table(sums))
    fit = fit_histogram(sums)
    out = fit.as_dict()
    out.update({"n_rois": int(sums.size), "on_device": bool(a.on_device)})
    if a.on_device:
        out["model_signal_mean"], out["model_background_mean"] = sig + bg, bg
    ctx.write_json("fit.json", out)
    print(f"fidelity {fit.fidelity:.5f} at threshold {fit.threshold}")


def cmd_fit_blowout(ctx: RunContext):
    from .spectroscopy import SurvivalCurve, fit_blowout
    x, y = _read_columns(ctx.args.csv, "detuning_mhz", "survival")
    fit = fit_blowout(SurvivalCurve(x, y), floor=ctx.args.floor)
    ctx.write_json("blowout_fit.json", fit.as_dict())
    print("no dip" if not fit.has_dip else f"center {fit.center:.4f} +- {fit.stderr['center']:.4f} MHz")


def cmd_fit_mixture(ctx: RunContext):
    from .optics import lattice_profile, maxima_stark_shifts
    from .spectroscopy import SurvivalCurve, fit_mixture
    a = ctx.args
    x, y = _read_columns(a.csv, "detuning_mhz", "survival")
    if a.centers:
        centers = _floats(a.centers, "centers")
    else:
        kappa = ctx.cfg.tweezer.stark_kappa if a.kappa is None else a.kappa
        prof = lattice_profile(ctx.cfg.chip, ctx.cfg.tweezer, envelope="gaussian",
                               focal_offset=a.focal_offset)
        centers = maxima_stark_shifts(prof, kappa)
    fit = fit_mixture(SurvivalCurve(x, y), centers, a.width, floor=a.floor)
    ctx.write_json("mixture_fit.json", {
        "centers_mhz": list(centers), "width_mhz": a.width, "weights": fit.weights,
        "stderr": fit.stderr, "lost": fit.lost, "identifiable": fit.identifiable,
        "residual_norm": fit.residual_norm})
    print("non-identifiable centres" if not fit.identifiable
          else "weights " + ", ".join(f"{w:.4f}" for w in fit.weights))


def cmd_map_twophoton(ctx: RunContext):
    from .spectroscopy import two_photon_response
    a = ctx.args
    tp = ctx.cfg.twophoton
    x = _range(a.d852, "d852")
    y = _range(a.d1470, "d1470")
    X, Y = np.meshgrid(x, y)
    sig, surv, det = two_photon_response(X, Y, tp)
    rows = [[_fmt(X[i, j]), _fmt(Y[i, j]), _fmt(det[i, j]), _fmt(sig[i, j]), _fmt(surv[i, j])]
            for i in range(y.size) for j in range(x.size)]
    ctx.write_csv("twophoton_map.csv",
                  ["d852_mhz", "d1470_mhz", "detected", "signal", "survival"], rows)
    i, j = np.unravel_index(int(np.argmax(det)), det.shape)
    ctx.write_json("twophoton_summary.json", {
        "max_detected": float(det[i, j]), "argmax_d852_mhz": float(x[j]),
        "argmax_d1470_mhz": float(y[i]), "ridge_sum_mhz": float(x[j] + y[i]),
        "light_shift_mhz": tp.light_shift})


def cmd_lifetime(ctx: RunContext):
    from .spectroscopy import fit_lifetime, lifetime_curve
    a = ctx.args
    rates = ctx.cfg.rates
    tau = a.tau if a.tau is not None else (
        rates.lifetime_device if a.location == "device" else rates.lifetime_loading)
    holds = np.linspace(0.0, a.span * tau, a.holds)
    data = lifetime_curve(holds, tau, make_rng(ctx.seed, STREAM_LIFETIME), a.atoms)
    ctx.write_csv("lifetime.csv", ["hold_s", "n_atoms", "survivors"],
                  [[_fmt(t), int(n), int(k)] for t, n, k in
                   zip(data.hold_times, data.n_atoms, data.survivors)])
    fit = fit_lifetime(data)
    ctx.write_json("lifetime_fit.json", {"tau_true_s": tau, "tau_s": fit.tau,
                                         "tau_err_s": fit.tau_err, "amplitude": fit.amplitude,
                                         "ok": fit.ok, "message": fit.message})
    if not fit.ok:
        raise ModelError(f"lifetime fit failed: {fit.message}")
    print(f"tau = {fit.tau:.4g} +- {fit.tau_err:.2g} s")


def cmd_autofocus_scan(ctx: RunContext):
    from .autofocus import BlurStack, device_pattern, scan_focus
    from .imaging import read_raw
    a = ctx.args
    if a.frames_dir:
        files = sorted(Path(a.frames_dir).glob("*.raw"))
        if len(files) < 5:
            raise ModelError(f"need at least 5 raw frames in {a.frames_dir}")
        z, imgs = [], []
        for f in files:
            data, meta = read_raw(f)
            if "z_um" not in meta:
                raise ModelError(f"{f.name}: sidecar lacks z_um")
            z.append(float(meta["z_um"]))
            imgs.append(data.astype(float))
        z_true = None
    else:
        rng = make_rng(ctx.seed, STREAM_AUTOFOCUS)
        z = _range(a.z, "z")
        stack = BlurStack(device_pattern(rng), a.z_focus, photons=a.photons)
        imgs = [stack(v, rng) for v in z]
        z_true = a.z_focus
    sub = None
    if a.subregion:
        r0, r1, c0, c1 = (int(v) for v in _floats(a.subregion, "subregion"))
        sub = (slice(r0, r1), slice(c0, c1))
    scan = scan_focus(z, imgs, a.target, side=a.side, sigma_space=a.sigma_space,
                      sigma_range=a.sigma_range, subregion=sub)
    ctx.write_csv("focus_scan.csv", ["z_um", "score"],
                  [[_fmt(zz), _fmt(s)] for zz, s in zip(scan.z_positions, scan.scores)])
    ctx.write_json("focus.json", {"best_z_um": scan.best_z, "recommended_z_um": scan.recommended_z,
                                  "target_fraction": a.target, "side": a.side,
                                  "out_of_range": scan.out_of_range, "true_focus_um": z_true})
    print(f"best z {scan.best_z:.4g} um, recommended {scan.recommended_z:.4g} um"
          + (" (focus outside scan range)" if scan.out_of_range else ""))


def cmd_plan(ctx: RunContext):
    from .planner import N_ON_ONE_DEVICE, ONE_PER_DEVICE, crossing_report, plan_rearrangement
    a = ctx.args
    if not a.occupancy or set(a.occupancy) - {"0", "1"}:
        raise ConfigError("occupancy must be a string of 0/1 characters")
    occ = [c == "1" for c in a.occupancy]
    mode = {"one-per-device": ONE_PER_DEVICE, "n-on-one-device": N_ON_ONE_DEVICE}[a.mode]
    plan = plan_rearrangement(occ, ctx.cfg, mode, a.k)
    rep = crossing_report(plan)
    feas = {"feasible": True, "crossing_free": rep["order_violations"] == 0,
            "min_separation_mhz": rep["min_separation_mhz"], "duration_ms": plan.duration,
            **plan.report}
    ctx.write_text("plan.json", plan.dumps() + "\n")
    ctx.write_json("feasibility.json", feas)
    print(plan.dumps())
    print(json.dumps(_finite(feas), sort_keys=True))


def cmd_pipeline(ctx: RunContext):
    from .planner import binomial_tail, simulate_pipeline
    a = ctx.args
    rates = ctx.cfg.rates
    if a.no_losses:
        rates = replace(rates, imaging_survival=1.0, rearrange_survival=1.0)
    st = simulate_pipeline(rates, a.sites, a.shots, ctx.seed, device_weight=a.device_weight,
                           threads=a.threads)
    oracle = binomial_tail(a.sites, rates.load_prob, np.arange(1, a.sites + 1))
    ctx.write_csv("pipeline.csv", ["slot", "raw", "corrected", "raw_stderr", "binomial_oracle"],
                  [[k + 1, _fmt(st.raw[k]), _fmt(st.corrected[k]), _fmt(st.raw_stderr[k]),
                    _fmt(oracle[k])] for k in range(a.sites)])
    ctx.write_json("pipeline_summary.json", {"shots": a.shots, "sites": a.sites,
                                             "mean_atoms_image2": st.mean_atoms_image2,
                                             "image1_fill": st.image1_mean})
    print(f"mean atoms in image 2: {st.mean_atoms_image2:.4f}")


def cmd_average(ctx: RunContext):
    from .analysis import average_frames, subtract_background, write_averaged, write_pgm
    from .imaging import read_frame
    a = ctx.args
    img = average_frames([read_frame(p) for p in a.frames])
    if a.background:
        img = subtract_background(img, average_frames([read_frame(p) for p in a.background]))
    write_averaged(ctx.path("averaged.raw"), img)
    ctx.outputs.append("averaged.json")
    if a.pgm:
        write_pgm(ctx.path("averaged.pgm"), img.mean)


def cmd_overlay(ctx: RunContext):
    from .analysis import overlay_devices, write_pgm
    from .imaging import read_raw, write_raw
    a = ctx.args
    atoms, _ = read_raw(a.atoms)
    dev, _ = read_raw(a.devices)
    comp, s = overlay_devices(atoms.astype(float), dev.astype(float), a.rule)
    write_raw(ctx.path("overlay.raw"), comp, {"scale": s, "rule": a.rule})
    ctx.outputs.append("overlay.json")
    if a.pgm:
        write_pgm(ctx.path("overlay.pgm"), comp)


COMMANDS = {
    "simulate-loading": cmd_simulate_loading,
    "simulate-imaging": cmd_simulate_imaging,
    "fit-blowout": cmd_fit_blowout,
    "fit-mixture": cmd_fit_mixture,
    "map-twophoton": cmd_map_twophoton,
    "lifetime": cmd_lifetime,
    "autofocus-scan": cmd_autofocus_scan,
    "plan": cmd_plan,
    "pipeline": cmd_pipeline,
    "average": cmd_average,
    "overlay": cmd_overlay,
    "lattice": cmd_lattice,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(2, f"error: usage: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file (default: packaged default.cfg)")
    common.add_argument("--seed", type=int, help="RNG seed, overrides config and ATOMFORGE_SEED")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--threads", type=int, default=0, help="worker threads, 0 = auto")

    p = _Parser(prog="atomforge", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"atomforge {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("lattice", parents=[common], help="standing-wave profile above the membrane")
    s.add_argument("--z-max", type=float, default=1500.0, help="nm")
    s.add_argument("--points", type=int, default=3001)
    s.add_argument("--envelope", choices=["plane", "gaussian"], default="plane")
    s.add_argument("--focal-offset", type=float, default=0.0, help="nm above the surface")

    s = sub.add_parser("simulate-loading", parents=[common], help="Monte Carlo device loading")
    s.add_argument("--sweep", help="focal_offset=a:b:n (nm)")
    s.add_argument("--trials", type=int)
    s.add_argument("--timestep", type=float, help="us")
    s.add_argument("--temperature", type=float, help="uK")

    s = sub.add_parser("simulate-imaging", parents=[common], help="synthetic frames and histogram fit")
    s.add_argument("--frames", type=int, default=1000)
    s.add_argument("--sites", type=int, default=9)
    s.add_argument("--p-loss", type=float, default=0.0)
    s.add_argument("--on-device", action="store_true",
                   help="use the derived on-device signal/background set")

    s = sub.add_parser("fit-blowout", parents=[common], help="Lorentzian dip fit")
    s.add_argument("csv", help="CSV with detuning_mhz,survival")
    s.add_argument("--floor", type=float, default=0.0)

    s = sub.add_parser("fit-mixture", parents=[common], help="lattice-site weights")
    s.add_argument("csv", help="CSV with detuning_mhz,survival")
    s.add_argument("--centers", help="c1,c2,c3 in MHz (default: from the lattice model)")
    s.add_argument("--width", type=float, default=6.0, help="FWHM, MHz")
    s.add_argument("--floor", type=float, default=0.0)
    s.add_argument("--kappa", type=float, help="MHz per unit intensity ratio")
    s.add_argument("--focal-offset", type=float, default=-2000.0, help="nm")

    s = sub.add_parser("map-twophoton", parents=[common], help="detected signal vs two detunings")
    s.add_argument("--d852", default="-300:50:71", help="a:b:n MHz")
    s.add_argument("--d1470", default="-100:200:61", help="a:b:n MHz")

    s = sub.add_parser("lifetime", parents=[common], help="synthetic decay and fit")
    s.add_argument("--location", choices=["loading", "device"], default="loading")
    s.add_argument("--tau", type=float, help="s, overrides the rate table")
    s.add_argument("--atoms", type=int, default=500)
    s.add_argument("--holds", type=int, default=8)
    s.add_argument("--span", type=float, default=2.0, help="longest hold in units of tau")

    s = sub.add_parser("autofocus-scan", parents=[common], help="focus score vs z")
    s.add_argument("--frames-dir", help="directory of raw frames with z_um in the sidecar")
    s.add_argument("--z", default="-3:3:25", help="a:b:n um for synthetic stacks")
    s.add_argument("--z-focus", type=float, default=0.4, help="um, synthetic true focus")
    s.add_argument("--photons", type=float, default=200.0)
    s.add_argument("--target", type=float, default=0.8)
    s.add_argument("--side", choices=["below", "above"], default="below")
    s.add_argument("--sigma-space", type=float, default=1.0)
    s.add_argument("--sigma-range", type=float, default=20.0)
    s.add_argument("--subregion", help="r0,r1,c0,c1")

    s = sub.add_parser("plan", parents=[common], help="rearrangement plan")
    s.add_argument("--occupancy", required=True, help="e.g. 101101011")
    s.add_argument("--mode", choices=["one-per-device", "n-on-one-device"], default="one-per-device")
    s.add_argument("--k", type=int, default=3, help="atoms per device in n-on-one-device mode")

    s = sub.add_parser("pipeline", parents=[common], help="load/compress/move statistics")
    s.add_argument("--shots", type=int, default=10000)
    s.add_argument("--sites", type=int, default=9)
    s.add_argument("--no-losses", action="store_true")
    s.add_argument("--device-weight", type=float, default=1.0)

    s = sub.add_parser("average", parents=[common], help="average raw frames")
    s.add_argument("frames", nargs="+")
    s.add_argument("--background", nargs="+")
    s.add_argument("--pgm", action="store_true")

    s = sub.add_parser("overlay", parents=[common], help="atom image over device image")
    s.add_argument("--atoms", required=True)
    s.add_argument("--devices", required=True)
    s.add_argument("--rule", choices=["match-peak", "match-norm"], default="match-peak")
    s.add_argument("--pgm", action="store_true")
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    t0 = time.perf_counter()
    try:
        ctx = RunContext(args)
        COMMANDS[args.command](ctx)
        ctx.manifest(argv, time.perf_counter() - t0)
    except AtomforgeError as exc:
        print(f"error: {type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: IOError: {_one_line(exc)}", file=sys.stderr)
        return 4
    return 0


def _one_line(exc) -> str:
    return " ".join(str(exc).split())


if __name__ == "__main__":
    sys.exit(main())
