import math
from dataclasses import replace

import numpy as np
import pytest

from atomforge.core import CS_MASS_UK, ModelError, make_rng
from atomforge.montecarlo import (LOST, LoadingDistribution, TransferScenario, TrapTooShallow,
                                  classify, energy_drift, loading_distribution,
                                  sample_thermal_state, simulate_transfer, simulate_trials,
                                  site_focal_offset, validate_timestep, well_map,
                                  write_sweep_csv)


@pytest.fixture(scope="module")
def scenario(cfg):
    return TransferScenario.from_config(cfg)


def harmonic(k):
    return lambda z: 0.5 * k * np.asarray(z) ** 2


def test_equipartition_oracle():
    # 1D harmonic well: <KE> = <PE> = kT/2, so mean total energy = kT.
    t, k, n = 50.0, 1.0e4, 10_000
    z, v = sample_thermal_state(t, harmonic(k), (-1.0, 1.0), make_rng(1, 0), n)
    e = 0.5 * CS_MASS_UK * v**2 + 0.5 * k * z**2
    se = e.std(ddof=1) / math.sqrt(n)
    assert abs(e.mean() - t) < 3 * se
    assert z.var() == pytest.approx(t / k, rel=0.05)
    assert v.var() == pytest.approx(t / CS_MASS_UK, rel=0.05)


def test_zero_temperature_at_minimum():
    z, v = sample_thermal_state(0.0, lambda x: (np.asarray(x) - 0.3) ** 2, (-1, 1),
                                make_rng(0, 0), 5, grid=2001)
    assert np.allclose(z, 0.3) and np.all(v == 0)


def test_too_shallow():
    # well depth 25 uK (window edge) at T = 50 uK
    with pytest.raises(TrapTooShallow):
        sample_thermal_state(50.0, harmonic(50.0), (-1.0, 1.0), make_rng(0, 0), 10)


def test_bound_energy_cutoff():
    z, v = sample_thermal_state(50.0, harmonic(1e4), (-1, 1), make_rng(2, 0), 2000, e_max=60.0)
    assert np.all(0.5 * CS_MASS_UK * v**2 + 0.5e4 * z**2 < 60.0)


def test_scenario_validation():
    with pytest.raises(ModelError):
        TransferScenario(approach_speed=0)
    with pytest.raises(ModelError):
        TransferScenario(temperature=-1)


def test_timestep_validation(scenario):
    assert validate_timestep(scenario) < 1e-4
    with pytest.raises(ModelError, match="energy drift"):
        validate_timestep(replace(scenario, timestep=0.5))


def test_energy_conservation_halving(scenario):
    d1 = energy_drift(scenario)
    d2 = energy_drift(replace(scenario, timestep=scenario.timestep / 2), n_steps=40000)
    assert d1 < 1e-4 and d2 < 1e-4
    assert d2 < d1 / 3  # second-order integrator


def test_no_reflection_never_lost(scenario):
    # focus well above the surface: a bound atom stays in the envelope well
    sc = replace(scenario, reflection=0j, focal_offset=5000.0, n_trials=300)
    ens = simulate_trials(sc, 3, threads=1)
    assert np.all(ens.well_index == 1)


def test_quasi_static_zero_temperature(scenario):
    sc = replace(scenario, temperature=0.0, approach_speed=0.2, n_trials=100)
    dist = loading_distribution(sc, 0, threads=1)
    assert len(dist.counts) == 1
    (well, count), = dist.counts.items()
    assert well != LOST and count == 100


def test_thread_independence(scenario):
    sc = replace(scenario, n_trials=600)
    a = simulate_trials(sc, 11, threads=1)
    b = simulate_trials(sc, 11, threads=3, chunk=70)
    assert np.array_equal(a.well_index, b.well_index)
    assert np.array_equal(a.position, b.position)


def test_single_trial_matches_stream(scenario):
    sc = replace(scenario, n_trials=5)
    ens = simulate_trials(sc, 9, threads=1)
    from atomforge.core import STREAM_MC
    for i in range(5):
        assert simulate_transfer(sc, make_rng(9, (STREAM_MC, i))) == ens.well_index[i]


def test_distribution_partition(scenario):
    dist = loading_distribution(replace(scenario, n_trials=500), 5, threads=1)
    assert abs(sum(dist.weights_row(3)) - 1.0) < 1e-9
    assert abs(sum(dist.counts.values()) - 500) == 0
    for w, s in zip(dist.weights_row(3), dist.stderr_row(3)):
        assert s == pytest.approx(math.sqrt(w * (1 - w) / 500))
    with pytest.raises(ModelError):
        loading_distribution(replace(scenario, n_trials=50), 5)


def test_monotone_in_temperature(scenario):
    n = 10_000
    bound = []
    for t in (30.0, 120.0):
        d = loading_distribution(replace(scenario, temperature=t, n_trials=n), 21,
                                 check_timestep=False)
        bound.append(1.0 - d.lost)
    se = math.sqrt(sum(b * (1 - b) / n for b in bound))
    assert bound[1] <= bound[0] + 3 * se


def test_classify_at_minima(scenario):
    wm = well_map(scenario, 1.0)
    z = wm.minima[:3]
    out = classify(scenario, z, np.zeros(3), np.ones(3, bool), 1.0, wm)
    assert list(out) == [1, 2, 3]
    fast = classify(scenario, z, np.full(3, 5.0), np.ones(3, bool), 1.0, wm)
    assert np.all(fast == LOST)
    dead = classify(scenario, z, np.zeros(3), np.zeros(3, bool), 1.0, wm)
    assert np.all(dead == LOST)


def test_wells_match_lattice(scenario):
    wm = well_map(scenario, 1.0)
    # minima of the potential are the intensity maxima, one half wavelength apart
    assert np.allclose(np.diff(wm.minima[:3]) * 1e3, 467.5, atol=1.0)


def test_tilt_offset():
    assert site_focal_offset(200.0, 2.0, 10.0) == 220.0
    assert site_focal_offset(200.0, 0.0, 10.0) == 200.0


def test_sweep_csv(tmp_path):
    d = LoadingDistribution({1: 3, 2: 5, 4: 1, LOST: 1}, 10)
    p = tmp_path / "s.csv"
    write_sweep_csv([(100.0, d)], p)
    head, row = p.read_text().splitlines()
    assert head.startswith("offset_nm,w_z1,w_z2,w_z3,w_z4plus,w_lost,stderr_z1")
    vals = [float(x) for x in row.split(",")]
    assert vals[1:6] == [0.3, 0.5, 0.0, 0.1, 0.1]
