import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from phimodule.datagen import (CHARGED_PAIRS, GenerationError, SyntheticSpec, coulomb_lj_energy,
                               gen_carbyne_chain, gen_point_charge_set, split_dataset,
                               split_indices)
from phimodule.molgraph import AtomicSystem, build_radius_graph, build_weighted_laplacian, format_xyz, parse_xyz


def loop_energy(s, eps, sigma):
    e = 0.0
    for i in range(s.n_atoms):
        for j in range(i + 1, s.n_atoms):
            d = np.sqrt(sum((s.positions[i, c] - s.positions[j, c]) ** 2 for c in range(3)))
            e += s.charges[i] * s.charges[j] / d
            if eps:
                e += 4 * eps * ((sigma / d) ** 12 - (sigma / d) ** 6)
    return e


def test_energy_examples(rng):
    pair = AtomicSystem([[0, 0, 0], [2, 0, 0]], [3, 9], charges=[1.0, -1.0])
    assert coulomb_lj_energy(pair) == -0.5
    zero = AtomicSystem(rng.uniform(0, 5, (4, 3)), [6] * 4, charges=np.zeros(4))
    assert coulomb_lj_energy(zero) == 0.0
    six = AtomicSystem(rng.uniform(0, 5, (6, 3)), [6] * 6, charges=rng.normal(size=6))
    assert abs(coulomb_lj_energy(six, 0.02, 2.2) - loop_energy(six, 0.02, 2.2)) <= 1e-12
    with pytest.raises(ValueError):
        coulomb_lj_energy(AtomicSystem([[0, 0, 0], [1, 0, 0]], [1, 1]))


def test_spec_validation():
    for bad in ({"atoms_min": 1}, {"atoms_min": 5, "atoms_max": 4}, {"box": 0},
                {"charge_scheme": "x"}, {"box_min": 20.0}):
        with pytest.raises(ValueError):
            SyntheticSpec(**bad)


def test_determinism_and_labels():
    spec = SyntheticSpec(n_molecules=30, seed=3)
    a, b = gen_point_charge_set(spec), gen_point_charge_set(spec)
    assert format_xyz(a) == format_xyz(b)
    assert format_xyz(a) != format_xyz(gen_point_charge_set(SyntheticSpec(n_molecules=30, seed=4)))
    for s in a:
        assert 8 <= s.n_atoms <= 16
        assert np.sum(s.charges) == 0.0
        assert abs(s.energy - loop_energy(s, spec.lj_epsilon, spec.lj_sigma)) <= 1e-12
        d = np.linalg.norm(s.positions[:, None] - s.positions[None], axis=-1)
        np.fill_diagonal(d, np.inf)
        assert d.min() >= 0.8 * spec.lj_sigma
    charge_of = {z: q for c, an, q in CHARGED_PAIRS for z, q in ((c, q), (an, -q))}
    for s in a:
        for z, q in zip(s.atomic_numbers, s.charges):
            assert q == charge_of.get(int(z), 0.0)


def test_random_neutralized_exactly_neutral():
    for s in gen_point_charge_set(SyntheticSpec(n_molecules=50, charge_scheme="random-neutralized")):
        assert np.sum(s.charges) == 0.0


def test_mean_energy_reproducible():
    spec = SyntheticSpec(n_molecules=1000, seed=11)
    e1 = np.array([s.energy for s in gen_point_charge_set(spec)])
    e2 = np.array([s.energy for s in gen_point_charge_set(spec)])
    assert np.isfinite(np.mean(np.abs(e1)))
    assert np.array_equal(np.histogram(e1, 20)[0], np.histogram(e2, 20)[0])


def test_rejection_budget():
    with pytest.raises(GenerationError):
        gen_point_charge_set(SyntheticSpec(n_molecules=1, atoms_min=16, box=2.0, max_attempts=2))


def test_xyz_roundtrip():
    data = gen_point_charge_set(SyntheticSpec(n_molecules=5))
    back = parse_xyz(format_xyz(data))
    for a, b in zip(data, back):
        assert np.max(np.abs(a.positions - b.positions)) <= 1e-9
        assert abs(a.energy - b.energy) <= 1e-12
        assert np.array_equal(a.charges, b.charges)


def test_carbyne():
    c = gen_carbyne_chain(2)
    assert np.allclose(c.positions, [[0, 0, 0], [1.3, 0, 0]])
    g = build_radius_graph(gen_carbyne_chain(10_000), 6.0)
    deg = np.bincount(g.src, minlength=10_000)
    assert deg[10:-10].max() <= 2 * int(6.0 // 1.3) == 8
    with pytest.raises(ValueError):
        gen_carbyne_chain(1)
    chain = gen_carbyne_chain(12)
    rev = chain.positions[::-1].copy()
    L = build_weighted_laplacian(build_radius_graph(chain)).toarray()
    Lr = build_weighted_laplacian(build_radius_graph(AtomicSystem(rev, chain.atomic_numbers))).toarray()
    assert np.allclose(Lr, L[::-1, ::-1], atol=1e-15)


@given(st.integers(1, 500), st.integers(0, 1000))
def test_split_partition(n, seed):
    tr, va, te = split_indices(n, seed)
    assert np.array_equal(np.sort(np.concatenate([tr, va, te])), np.arange(n))
    assert np.array_equal(split_indices(n, seed)[0], tr)


def test_split_dataset_sizes():
    tr, va, te = split_dataset(list(range(2000)), 0)
    assert (len(tr), len(va), len(te)) == (1600, 200, 200)
    with pytest.raises(ValueError):
        split_indices(10, 0, (0.5, 0.5, 0.5))
