import itertools

import numpy as np
import pytest

from kzpeps.model import (
    AnnealSchedule,
    CubicLattice,
    DisorderInstance,
    GroundReference,
    classical_ground,
    default_schedule,
    generate_disorder,
    ising_energies,
    load_schedule,
    schedule_at,
)


def test_disorder_is_deterministic():
    a = generate_disorder(2, 7)
    b = generate_disorder(2, 7)
    np.testing.assert_array_equal(a.couplings, b.couplings)
    assert not np.array_equal(a.couplings, generate_disorder(2, 8).couplings)
    assert np.all(np.abs(a.couplings) <= 1)


@pytest.mark.parametrize("L, n", [(2, 12), (8, 1344)])
def test_bond_count(L, n):
    assert CubicLattice(L).n_bonds == n


def test_lattice_too_small():
    with pytest.raises(ValueError):
        generate_disorder(1, 0)


def test_disorder_json_roundtrip(tmp_path):
    inst = generate_disorder(2, 3)
    inst.save(tmp_path / "d.json")
    back = DisorderInstance.load(tmp_path / "d.json")
    np.testing.assert_array_equal(back.couplings, inst.couplings)
    assert back.lattice == inst.lattice and back.seed == 3


def test_schedule_tabulated_and_linear():
    sch = AnnealSchedule([0.0, 0.5, 1.0], [2.0, 1.0, 0.0], [0.0, 1.0, 3.0], kind="linear")
    assert schedule_at(sch, 0.5) == (1.0, 1.0)
    g, j = schedule_at(sch, 0.75)
    assert g == pytest.approx(0.5) and j == pytest.approx(2.0)


def test_default_schedule_starts_with_driver_only():
    sch = default_schedule()
    g, j = schedule_at(sch, 0.0)
    assert j == 0.0 and g > 0


def test_schedule_domain_errors(tmp_path):
    with pytest.raises(ValueError):
        schedule_at(default_schedule(), 1.5)
    with pytest.raises(ValueError):
        AnnealSchedule([0.0, 0.6], [1.0, 0.0], [0.0, 1.0])
    with pytest.raises(ValueError):
        AnnealSchedule([0.0, 1.0], [1.0, -1.0], [0.0, 1.0])
    bad = tmp_path / "bad.csv"
    bad.write_text("s,a,b\n0,1,0\n1,0,1\n")
    with pytest.raises(ValueError):
        load_schedule(bad)


def test_schedule_csv_roundtrip(tmp_path):
    sch = default_schedule(11)
    sch.save_csv(tmp_path / "s.csv")
    back = load_schedule(tmp_path / "s.csv")
    np.testing.assert_array_equal(back.s, sch.s)
    assert schedule_at(back, 0.33) == pytest.approx(schedule_at(sch, 0.33))


def test_single_bond_ground():
    inst = DisorderInstance(CubicLattice((2, 1, 1)), [1.0])
    g = classical_ground(inst)
    assert g.energy == -1.0
    np.testing.assert_array_equal(g.correlators, [-1.0])


def test_exact_ground_matches_enumeration():
    inst = generate_disorder(2, 5)
    g = classical_ground(inst)
    configs = np.array(list(itertools.product([0, 1], repeat=8)))
    assert g.energy == pytest.approx(ising_energies(inst, configs).min(), abs=1e-12)
    assert g.certified and g.method == "exact-enumeration"


def test_ferromagnet_ground():
    inst = DisorderInstance(CubicLattice(2), -np.ones(12))
    assert classical_ground(inst).energy_per_bond == pytest.approx(-1.0)


def test_annealed_ground_on_ferromagnet():
    inst = DisorderInstance(CubicLattice(3), -np.ones(CubicLattice(3).n_bonds))
    g = classical_ground(inst, budget=2, sweeps=200)
    assert g.energy_per_bond == pytest.approx(-1.0)
    assert not g.certified


def test_ground_json_roundtrip():
    g = classical_ground(generate_disorder(2, 2))
    back = GroundReference.from_json(g.to_json())
    assert back.energy == g.energy
    np.testing.assert_array_equal(back.config, g.config)
