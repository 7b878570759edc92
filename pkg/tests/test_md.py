import numpy as np
import pytest

from phimodule.md import (BOLTZMANN_EV, ENERGY_UNIT, MDState, combine_force_fns, drift_trend,
                          energy_drift, kinetic_energy, lj_force_fn, maxwell_boltzmann,
                          model_force_fn, nve_run, restraint_force_fn, velocity_verlet_step,
                          write_drift_csv)
from phimodule.molgraph import AtomicSystem, read_xyz
from phimodule.phi import PhiConfig, PhiModel
from phimodule.potential import HostConfig

from conftest import fd_gradient


def harmonic(k=1.0):
    def fn(x):
        return -k * x, float(0.5 * k * np.sum(x * x))
    return fn


def zero_force(x):
    return np.zeros_like(x), 0.0


def test_zero_force_straight_line():
    st_ = MDState([[0, 0, 0]], [[0.1, -0.2, 0.3]], [2.0])
    for _ in range(10):
        velocity_verlet_step(st_, zero_force, 0.5)
    assert np.allclose(st_.positions, [[0.5, -1.0, 1.5]], atol=1e-14)
    assert np.array_equal(st_.velocities, [[0.1, -0.2, 0.3]])


def test_harmonic_oscillator_period_and_energy():
    sysm = AtomicSystem([[1.0, 0, 0]], [1])
    steps = int(round(2 * np.pi / 0.01))
    st_ = nve_run(sysm, harmonic(), steps, dt=0.01, velocities=[[0, 0, 0]], masses=[1.0], unit=1.0)
    assert abs(st_.positions[0, 0] - np.cos(steps * 0.01)) <= 1e-3
    st_ = nve_run(sysm, harmonic(), 10_000, dt=0.01, velocities=[[0, 0, 0]], masses=[1.0], unit=1.0)
    e = np.array(st_.trace)[:, 1]
    err = np.abs(e - 0.5)
    assert err.max() <= 1e-4
    # bounded without secular growth: late errors are no larger than early ones
    assert err[-2000:].max() <= 1.1 * err[:2000].max()


def test_time_reversal():
    rng = np.random.default_rng(0)
    fn = lj_force_fn(0.1, 1.0)
    x0 = np.array([[0, 0, 0], [1.2, 0, 0], [0, 1.3, 0.1]])
    v0 = rng.normal(0, 0.01, (3, 3))
    st_ = MDState(x0, v0, np.ones(3))
    for _ in range(100):
        velocity_verlet_step(st_, fn, 0.5)
    st_.velocities = -st_.velocities
    st_.forces = None
    for _ in range(100):
        velocity_verlet_step(st_, fn, 0.5)
    assert np.max(np.abs(st_.positions - x0)) <= 1e-10
    assert np.max(np.abs(-st_.velocities - v0)) <= 1e-10


def test_one_force_evaluation_per_step():
    st_ = nve_run(AtomicSystem([[1.0, 0, 0]], [1]), harmonic(), 25, dt=0.1, masses=[1.0], unit=1.0)
    assert st_.steps == 25 and st_.force_evals == 26


def test_step_errors():
    st_ = MDState([[0, 0, 0]], [[0, 0, 0]], [1.0])
    with pytest.raises(ValueError):
        velocity_verlet_step(st_, zero_force, 0.0)
    with pytest.raises(FloatingPointError):
        velocity_verlet_step(st_, lambda x: (np.full_like(x, np.nan), 0.0), 0.1)
    with pytest.raises(ValueError):
        MDState([[0, 0, 0]], [[0, 0, 0]], [0.0])


def test_lj_dimer_drift():
    sysm = AtomicSystem([[0, 0, 0], [3.6, 0, 0]], [18, 18])
    st_ = nve_run(sysm, lj_force_fn(0.0104, 3.4), 10_000, dt=0.5, temperature=50.0, seed=1)
    max_rel, _, absolute = energy_drift(st_.trace)
    assert not absolute and max_rel <= 1e-4


def test_zero_parameter_model_zero_potential():
    host = HostConfig(n_features=4, n_interactions=1, n_rbf=4)
    model = PhiModel(host, PhiConfig(k=2), seed=0, alpha_init="zero")
    for p in model.params.values():
        p.data[:] = 0.0
    sysm = AtomicSystem([[0, 0, 0], [1.5, 0, 0], [0, 1.5, 0]], [6, 6, 8])
    st_ = nve_run(sysm, model_force_fn(model, sysm), 20, dt=0.5, seed=0)
    assert all(row[3] == 0.0 for row in st_.trace)


def test_momentum_conservation():
    sysm = AtomicSystem([[0, 0, 0], [3.0, 0, 0], [0, 3.1, 0.2], [2.9, 3.0, 0.1]], [6, 8, 7, 6])
    fn = combine_force_fns(lj_force_fn(0.01, 2.5), restraint_force_fn(1.0, 1.5))
    st_ = nve_run(sysm, fn, 500, dt=0.5, seed=2)
    p0 = st_.trace and (st_.masses[:, None] * maxwell_boltzmann(st_.masses, 300.0,
                        np.random.Generator(np.random.Philox(2)))).sum(axis=0)
    assert np.all(np.abs(st_.momentum() - p0) <= 1e-8)
    assert np.all(np.abs(p0) <= 1e-12)


def test_restraint_is_conservative():
    fn = restraint_force_fn(2.0, 1.0)
    x = np.random.default_rng(4).normal(0, 1.5, (5, 3))
    f, _ = fn(x)
    assert np.allclose(f, -fd_gradient(lambda p: fn(p)[1], x, 1e-6), atol=1e-7)
    assert np.allclose(f.sum(axis=0), 0, atol=1e-12)


def test_maxwell_boltzmann_temperature():
    m = np.full(20000, 12.0)
    v = maxwell_boltzmann(m, 300.0, np.random.default_rng(0))
    T = 2 * kinetic_energy(v, m) / (3 * len(m) * BOLTZMANN_EV)
    assert T == pytest.approx(300.0, rel=0.02)
    assert np.allclose((m[:, None] * v).sum(0), 0, atol=1e-10)


def test_energy_drift_examples():
    t = np.arange(100.0)
    assert energy_drift(np.c_[t, np.full(100, -3.0)]) == (0.0, 0.0, False)
    e0 = 2.0
    _, slope, _ = energy_drift(np.c_[t, e0 * (1 + 1e-6 * t)])
    assert abs(slope / 1000.0 - 1e-6) <= 1e-9
    a = energy_drift(np.c_[t, 0.01 * np.sin(t) * (t > 0)])
    b = energy_drift(np.c_[t, 0.01 * np.sin(t) * (t > 0) + 0.0])
    assert a[2] and a == b
    with pytest.raises(ValueError):
        energy_drift([[0.0, 1.0]])


def test_absolute_branch_shift_invariant():
    t = np.arange(50.0)
    e = np.r_[0.0, 1e-3 * np.cos(t[1:])]
    base = energy_drift(np.c_[t, e])
    # shifting every energy leaves absolute deviations unchanged
    dev = np.max(np.abs((e + 5.0) - (e[0] + 5.0)))
    assert base[2] and base[0] == pytest.approx(dev)


def test_drift_trend():
    t = np.arange(2000.0)
    noisy = -1.0 + 1e-4 * np.sin(0.3 * t)
    assert drift_trend(np.c_[t, noisy])["consistent_with_zero"]
    assert not drift_trend(np.c_[t, noisy + 1e-5 * t])["consistent_with_zero"]


def test_outputs(tmp_path):
    sysm = AtomicSystem([[0, 0, 0], [3.6, 0, 0]], [18, 18])
    st_ = nve_run(sysm, lj_force_fn(0.0104, 3.4), 20, trajectory_path=tmp_path / "t.xyz",
                  trajectory_every=5)
    assert len(read_xyz(tmp_path / "t.xyz")) == 4
    write_drift_csv(tmp_path / "d.csv", st_.trace)
    rows = (tmp_path / "d.csv").read_text().splitlines()
    assert rows[0] == "t_fs,e_total,e_kin,e_pot" and len(rows) == 22
    times = [r[0] for r in st_.trace]
    assert all(b > a for a, b in zip(times, times[1:]))
    assert ENERGY_UNIT == pytest.approx(103.6427, rel=1e-6)


def test_fd_oracle_forces_track_autodiff_trajectory():
    host = HostConfig(n_features=8, n_interactions=1, n_rbf=8)
    model = PhiModel(host, PhiConfig(k=2, hidden_channels=4), seed=1)
    pos = np.array([[0, 0, 0], [1.5, 0, 0], [0, 1.5, 0], [1.5, 1.5, 0], [0.75, 0.75, 1.3],
                    [0.75, 0.75, -1.3]])
    mol = AtomicSystem(pos, [6, 8, 7, 6, 8, 7])
    runs = {}
    for mode in ("autodiff", "fd-oracle"):
        fn = combine_force_fns(model_force_fn(model, mol, mode), restraint_force_fn(5.0, 1.6))
        runs[mode] = nve_run(mol, fn, 40, dt=0.5, seed=0)
    assert np.max(np.abs(runs["autodiff"].positions - runs["fd-oracle"].positions)) <= 1e-6
    max_rel, _, _ = energy_drift(runs["fd-oracle"].trace)
    assert max_rel <= 1e-3
