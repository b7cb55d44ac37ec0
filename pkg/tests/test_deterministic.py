import csv
import json
import warnings

import numpy as np
import pytest

from kzpeps.deterministic import (
    BoundaryTruncationWarning,
    EvalSettings,
    bond_correlators_det,
    build_boundaries,
    log_norm_at,
    residual_energy,
    residual_energy_det,
    save_correlators,
)
from kzpeps.model import CubicLattice, default_schedule, generate_disorder
from kzpeps.oracle import StateVector, exact_bond_correlators, exact_evolve, exact_residual_energy, peps_to_statevector
from kzpeps.peps import evolve, product_plus_x, product_state, random_peps


def _classical(lattice, config):
    vecs = np.zeros((lattice.n_sites, 2))
    vecs[np.arange(lattice.n_sites), np.asarray(config)] = 1.0
    return product_state(lattice, vecs)


def test_settings_validation():
    assert EvalSettings(3).chi_final == 18
    with pytest.raises(ValueError):
        EvalSettings(0)
    with pytest.raises(ValueError):
        EvalSettings(4, chi_final=2)


def test_product_state_exact_at_d1(inst2):
    st = product_plus_x(inst2.lattice)
    upper, lower = build_boundaries(st, EvalSettings(1))
    assert all(b.max_trunc_error == 0.0 for b in upper + lower if b is not None)
    res = bond_correlators_det(st, EvalSettings(1))
    assert np.max(np.abs(res.correlators)) < 1e-10
    assert res.boundary_error == 0.0


def test_all_up_correlators():
    lat = CubicLattice((2, 2, 3))
    res = bond_correlators_det(_classical(lat, np.zeros(lat.n_sites, int)), EvalSettings(1))
    np.testing.assert_allclose(res.correlators, 1.0, atol=1e-12)


def test_norm_matches_oracle(inst2, rng):
    st = random_peps(inst2.lattice, 2, rng)
    _, raw = peps_to_statevector(st)
    settings = EvalSettings(16)
    bnds = build_boundaries(st, settings)
    for m in range(1, 2):
        assert log_norm_at(st, m, settings, bnds) == pytest.approx(2 * np.log(raw), rel=1e-8, abs=1e-8)


@pytest.mark.filterwarnings("ignore::kzpeps.deterministic.BoundaryTruncationWarning")
def test_layer_consistency():
    rng = np.random.default_rng(3)
    lat = CubicLattice((2, 2, 3))
    st = random_peps(lat, 2, rng)
    settings = EvalSettings(16)
    bnds = build_boundaries(st, settings)
    vals = [log_norm_at(st, m, settings, bnds) for m in (1, 2)]
    assert abs(vals[0] - vals[1]) < 1e-6


def test_evolved_correlators_at_d16(evolved2, inst2, ground2):
    st, sv = evolved2
    res = bond_correlators_det(st, EvalSettings(16, chi_final=16))
    assert np.max(np.abs(res.correlators - exact_bond_correlators(sv, inst2))) < 1e-4
    Q = residual_energy(inst2, res.correlators, ground2)
    assert abs(Q - exact_residual_energy(sv, inst2, ground2)) < 2e-4


def test_convergence_in_d():
    inst = generate_disorder((2, 2, 3), 4)
    sched = default_schedule()
    st, _ = evolve(product_plus_x(inst.lattice), sched, inst, 1.0, 0.02, 3, 0.6)
    exact = exact_bond_correlators(peps_to_statevector(st)[0], inst)
    errs = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", BoundaryTruncationWarning)
        for d in (2, 4, 8, 16):
            res = bond_correlators_det(st, EvalSettings(d))
            errs.append(np.max(np.abs(res.correlators - exact)))
    assert all(b <= a + 1e-10 for a, b in zip(errs, errs[1:]))
    assert errs[-1] < 1e-6


def test_ground_state_has_zero_q(inst2, ground2):
    st = _classical(inst2.lattice, ground2.config)
    Q, res = residual_energy_det(st, inst2, ground2, EvalSettings(1))
    assert Q == pytest.approx(0.0, abs=1e-12)


def test_zero_correlators_q(inst2, ground2):
    Q = residual_energy(inst2, np.zeros(inst2.n_bonds), ground2)
    assert Q == pytest.approx(-ground2.energy / inst2.n_bonds)
    assert Q > 0


def test_small_d_warns(evolved2):
    with pytest.warns(BoundaryTruncationWarning):
        res = bond_correlators_det(evolved2[0], EvalSettings(1, trunc_tol=0.01))
    assert res.boundary_error > 0.01
    assert res.warnings


def test_q_nonnegative_within_error(evolved2, inst2, ground2):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", BoundaryTruncationWarning)
        Q, res = residual_energy_det(evolved2[0], inst2, ground2, EvalSettings(4))
    assert Q >= -3 * max(res.boundary_error, res.mps_error, 1e-12)


def test_save_correlators(tmp_path, evolved2, inst2):
    res = bond_correlators_det(evolved2[0], EvalSettings(4))
    save_correlators(tmp_path / "c.csv", inst2, res, {"t_a": 1.0})
    with open(tmp_path / "c.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == inst2.n_bonds
    assert rows[0].keys() == {"bond_i", "bond_j", "direction", "corr"}
    assert float(rows[5]["corr"]) == pytest.approx(res.correlators[5])
    meta = json.loads((tmp_path / "c.json").read_text())
    assert meta["d"] == 4 and meta["chi_final"] == 32 and meta["t_a"] == 1.0
    assert "max_truncation_error" in meta


def test_det_matches_statevector_evolution(inst2, ground2):
    sched = default_schedule()
    st, _ = evolve(product_plus_x(inst2.lattice), sched, inst2, 0.5, 0.01, 4, 0.6)
    sv = exact_evolve(StateVector.plus_x(8), sched, inst2, 0.5, 0.01, 0.6)
    Q, _ = residual_energy_det(st, inst2, ground2, EvalSettings(16))
    assert abs(Q - exact_residual_energy(sv, inst2, ground2)) < 1e-3
