import itertools
import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from atomforge.core import PlannerParams, RateTable
from atomforge.planner import (CHIRP, DROP, HOLD, N_ON_ONE_DEVICE, ONE_PER_DEVICE, PlanError,
                               Segment, ToneTimeline, binomial_tail, chirp, crossing_report,
                               device_capacity, plan_compression, plan_rearrangement,
                               simulate_pipeline)

PATTERNS = [tuple(int(b) for b in f"{m:09b}") for m in range(512)]


@settings(max_examples=200, deadline=None)
@given(f0=st.floats(-500, 500), f1=st.floats(-500, 500), dur=st.floats(0.01, 100))
def test_chirp_kinematics(f0, f1, dur):
    c = chirp(f0, f1, dur)
    assert abs(c(0.0) - f0) <= 1e-9 and abs(c(dur) - f1) <= 1e-9
    assert c.rate(0.0) == 0.0 and c.rate(dur) == 0.0
    h = dur / 2
    eps = dur * 1e-12
    assert abs(c(h - eps) - c(h + eps)) <= 1e-9 + c.peak_slew * 2 * eps
    assert abs(c(h) - 0.5 * (f0 + f1)) <= 1e-9
    assert abs(c.rate(h - eps) - c.rate(h + eps)) <= 1e-9 * max(1.0, abs(c.rate(h)))
    t = np.linspace(0, dur, 101)
    # symmetry (t, f) -> (T - t, f0 + f1 - f)
    assert np.max(np.abs(c(dur - t) - (f0 + f1 - c(t)))) <= 1e-9


def test_chirp_sampled_grid():
    c = chirp(90.0, 135.0, 1.0)
    t = np.linspace(0, 1, 100_001)
    f = c(t)
    # derivative from finite differences tracks the analytic rate
    fd = np.gradient(f, t)
    assert np.max(np.abs(fd[1:-1] - c.rate(t)[1:-1])) < 1e-2
    assert np.max(np.abs(np.diff(f))) < 1e-3  # no jumps
    assert np.all(np.diff(f) >= 0)
    assert c.peak_slew == pytest.approx(np.max(np.abs(c.rate(t))))


def test_timeline_rules():
    tl = ToneTimeline("Y0", "Y")
    tl.add(Segment(HOLD, "Y", 90, 90, 1.0))
    with pytest.raises(PlanError, match="jump"):
        tl.add(Segment(CHIRP, "Y", 91, 95, 1.0))
    tl.add(Segment(DROP, "Y", 90, 90, 0.0))
    with pytest.raises(PlanError, match="dropped"):
        tl.add(Segment(HOLD, "Y", 90, 90, 1.0))
    assert np.isnan(tl.freq(2.0))


def check_compression(plan, occ, tones, pitch):
    live = [t for t in plan.tones if not t.dropped]
    dropped = [int(t.tone_id[1:]) for t in plan.tones if t.dropped]
    assert dropped == [i for i, o in enumerate(occ) if not o]
    finals = [t.final_freq for t in live]
    # defect-free contiguous block, in the original order
    assert np.allclose(np.diff(finals), pitch)
    starts = [t.segments[0].f0 for t in live]
    assert starts == [tones[i] for i, o in enumerate(occ) if o]
    rep = crossing_report(plan)
    assert rep["order_violations"] == 0
    assert len(live) < 2 or rep["min_separation_mhz"] > 0


def test_all_512_compressions(cfg):
    tones = cfg.tweezer.tones_y
    for occ in PATTERNS:
        plan = plan_compression(occ, tones, 5.0, cfg.planner)
        check_compression(plan, occ, tones, 5.0)


@pytest.mark.parametrize("alignment", ["left", "center", "device"])
def test_alignment_modes(cfg, alignment):
    pp = replace(cfg.planner, alignment=alignment, first_device=2)
    plan = plan_compression((1, 0, 1, 0, 0, 0, 0, 0, 0), cfg.tweezer.tones_y, 5.0, pp)
    first = plan.report["targets_mhz"][0]
    assert first == {"left": 90.0, "center": 90.0 + 5.0 * 3, "device": 100.0}[alignment]


def test_idempotence(cfg):
    tones = cfg.tweezer.tones_y
    for n in range(10):
        occ = [1] * n + [0] * (9 - n)
        plan = plan_compression(occ, tones, 5.0, cfg.planner)
        assert plan.motion_free
        again = plan_compression(occ, [t.final_freq for t in plan.tones if not t.dropped]
                                 + [tones[i] for i in range(n, 9)], 5.0, cfg.planner)
        assert again.motion_free


def test_slew_limit(cfg):
    pp = replace(cfg.planner, max_slew=10.0)
    with pytest.raises(PlanError, match="slew"):
        plan_compression((0, 0, 0, 0, 0, 0, 0, 0, 1), cfg.tweezer.tones_y, 5.0, pp)


def test_overflow(cfg):
    pp = replace(cfg.planner, first_device=5)
    with pytest.raises(PlanError, match="overflow"):
        plan_compression([1] * 9, cfg.tweezer.tones_y, 5.0, pp, capacity=9)


def test_one_per_device_plan(cfg):
    occ = (1, 0, 1, 1, 0, 1, 0, 1, 1)
    plan = plan_rearrangement(occ, cfg, ONE_PER_DEVICE)
    r = plan.report
    assert r["devices"] == list(range(6))
    assert r["y_move_ms"] == pytest.approx(5.5 / 6.0)
    x0 = cfg.chip.loading_region_offset[0]
    assert r["x_move_ms"] == pytest.approx((31.5 - x0) / 30.0)
    for x, y in r["targets_um"]:
        assert x == pytest.approx(31.5)
    assert crossing_report(plan)["order_violations"] == 0
    assert r["max_slew_mhz_per_ms"] <= cfg.planner.max_slew


def test_n_on_one_device(cfg):
    plan = plan_rearrangement([1] * 6 + [0] * 3, cfg, N_ON_ONE_DEVICE, k=3)
    r = plan.report
    assert r["on_device"] == 3 and r["parked"] == 3
    xs = [x for x, _ in r["targets_um"]]
    assert all(x < 0 for x in xs[:3])
    assert all(0 < x < cfg.chip.device_length for x in xs[3:])
    assert np.allclose(np.diff(xs[3:]), cfg.planner.intra_device_spacing)
    assert crossing_report(plan)["order_violations"] == 0


def test_capacity(cfg):
    assert device_capacity(cfg.chip, cfg.planner) == 11
    with pytest.raises(PlanError, match="infeasible"):
        plan_rearrangement([1] * 9, cfg, N_ON_ONE_DEVICE, k=20)


def test_empty_plan_all_drop(cfg):
    plan = plan_rearrangement([0] * 9, cfg, ONE_PER_DEVICE)
    assert all(t.dropped for t in plan.tones) and plan.motion_free


def test_plan_json(cfg):
    plan = plan_rearrangement((1, 1, 0, 1, 0, 0, 0, 0, 1), cfg)
    doc = json.loads(plan.dumps())
    for tone in doc["tones"]:
        assert set(tone) == {"tone_id", "segments"}
        for seg in tone["segments"]:
            assert set(seg) == {"kind", "axis", "f0_mhz", "f1_mhz", "t_ms"}
    assert plan.dumps() == plan_rearrangement((1, 1, 0, 1, 0, 0, 0, 0, 1), cfg).dumps()


def test_binomial_tail_oracle():
    for k in range(11):
        exact = sum(math.comb(9, j) * 0.55**j * 0.45 ** (9 - j) for j in range(k, 10))
        assert binomial_tail(9, 0.55, k) == pytest.approx(exact, abs=1e-14)


def test_pipeline_trivial():
    st_ = simulate_pipeline(RateTable(1.0, 1.0, 1.0), 9, 200, 0)
    assert np.all(st_.raw == 1.0) and np.all(st_.corrected == 1.0)


def test_pipeline_monotone_and_threads():
    rates = RateTable()
    a = simulate_pipeline(rates, 9, 3000, 4, threads=1)
    b = simulate_pipeline(rates, 9, 3000, 4, threads=4)
    assert np.array_equal(a.raw, b.raw)
    # non-increasing in expectation; allow sampling noise at 3 sigma
    assert np.all(np.diff(a.raw) <= 3 * np.hypot(a.raw_stderr[1:], a.raw_stderr[:-1]))
    assert np.all(a.corrected >= a.raw)


def test_pipeline_image2_mean():
    st_ = simulate_pipeline(RateTable(), 9, 10_000, 2)
    expect = 9 * 0.55 * 0.875 * 0.77
    var = 9 * 0.55 * 0.875 * 0.77 * (1 - 0.55 * 0.875 * 0.77)
    assert abs(st_.mean_atoms_image2 - expect) < 3 * math.sqrt(var / 10_000)
