import numpy as np
import pytest
import scipy.linalg as sla

from kzpeps.model import AnnealSchedule, CubicLattice, default_schedule
from kzpeps.oracle import (
    StateVector,
    apply_step,
    exact_bond_correlators,
    exact_evolve,
    fidelity,
    peps_to_statevector,
)
from kzpeps.peps import (
    apply_field_gate,
    apply_ising_gate,
    evolve,
    load_checkpoint,
    ntu_metric,
    ntu_truncate,
    product_plus_x,
    product_state,
    random_peps,
    save_checkpoint,
    trotter_sweep,
    truncate_all,
)
from kzpeps.trotter import GateLayer, TrotterStep, make_step

SX = np.array([[0, 1], [1, 0]], dtype=complex)


def _sv(state):
    return peps_to_statevector(state)[0]


def _rotate_site(psi, n, site, theta):
    u = sla.expm(1j * theta * SX)
    t = np.moveaxis(psi.reshape((2,) * n), site, 0)
    t = np.tensordot(u, t, axes=(1, 0))
    return np.moveaxis(t, 0, site).reshape(-1)


def test_product_plus_x(inst2):
    st = product_plus_x(inst2.lattice)
    np.testing.assert_allclose(st.tensors[3].reshape(-1), [2**-0.5, 2**-0.5])
    sv, raw = peps_to_statevector(st)
    assert raw == pytest.approx(1.0)
    np.testing.assert_allclose(sv.amplitudes, np.full(256, 2.0**-4), atol=1e-14)
    assert fidelity(sv, sv) == pytest.approx(1.0)


def test_field_gate_zero_and_eigenstate(inst2):
    st = product_plus_x(inst2.lattice)
    before = [t.copy() for t in st.tensors]
    apply_field_gate(st, 2, 0.0)
    for a, b in zip(before, st.tensors):
        np.testing.assert_array_equal(a, b)
    apply_field_gate(st, 2, np.pi / 2)
    p = np.abs(_sv(st).amplitudes) ** 2
    np.testing.assert_allclose(p, np.full(256, 1 / 256), atol=1e-14)


def test_field_gate_matches_oracle(inst2, rng):
    st = random_peps(inst2.lattice, 2, rng)
    ref, norm = peps_to_statevector(st)
    theta = rng.uniform(0, np.pi)
    apply_field_gate(st, 5, theta)
    out, norm_after = peps_to_statevector(st)
    assert fidelity(out, _rotate_site(ref.amplitudes, 8, 5, theta)) > 1 - 1e-12
    assert norm_after == pytest.approx(norm, rel=1e-12)


def test_ising_gate_identity_truncates_back(inst2, rng):
    st = random_peps(inst2.lattice, 2, rng)
    ref = _sv(st)
    apply_ising_gate(st, 4, 0.0)
    assert st.bond_dim(4) == 4
    _, rep = ntu_truncate(st, 4, 2)
    assert rep.local_fidelity_loss < 1e-12
    assert st.bond_dim(4) == 2
    assert fidelity(_sv(st), ref) > 1 - 1e-12


def test_ising_gate_diagonal():
    lat = CubicLattice((2, 1, 1))
    phi = 0.37
    for a in (0, 1):
        for b in (0, 1):
            vecs = np.zeros((2, 2))
            vecs[0, a] = vecs[1, b] = 1.0
            st = apply_ising_gate(product_state(lat, vecs), 0, phi)
            amp = _sv(st).amplitudes[2 * a + b] * peps_to_statevector(st)[1]
            sign = 1 if a == b else -1
            assert abs(amp - np.exp(-1j * sign * phi)) < 1e-12


def test_ising_gate_two_site_expm(rng):
    lat = CubicLattice((2, 1, 1))
    vecs = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
    phi = rng.uniform(-1, 1)
    st = apply_ising_gate(product_state(lat, vecs), 0, phi)
    zz = np.diag([1.0, -1.0, -1.0, 1.0])
    ref = sla.expm(-1j * phi * zz) @ np.kron(vecs[0], vecs[1])
    sv, raw = peps_to_statevector(st)
    assert np.max(np.abs(sv.amplitudes * raw - ref)) < 1e-12


def test_gate_locality(inst2, rng):
    st = random_peps(inst2.lattice, 2, rng)
    before = [t.copy() for t in st.tensors]
    bd = inst2.lattice.bonds[7]
    apply_ising_gate(st, 7, 0.3)
    for i, (a, b) in enumerate(zip(before, st.tensors)):
        if i not in (bd.a, bd.b):
            np.testing.assert_array_equal(a, b)


def test_ntu_loss_monotone(evolved2):
    st = evolved2[0].copy()
    apply_ising_gate(st, 0, 0.4)
    losses = []
    for D in (1, 2, 3, 4):
        _, rep = ntu_truncate(st.copy(), 0, D)
        losses.append(rep.local_fidelity_loss)
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))
    assert losses[0] > 0


def test_ntu_metric_hermitian(evolved2):
    st = evolved2[0].copy()
    apply_ising_gate(st, 3, 0.4)
    gA, gB, *_ = ntu_metric(st, 3)
    M = np.kron(gA, gB)
    nrm = np.linalg.norm(M)
    assert np.linalg.norm(M - M.conj().T) / nrm < 1e-10
    assert np.linalg.eigvalsh(M).min() > -1e-10 * nrm


def test_one_step_exact_at_large_bond(inst2):
    sched = default_schedule()
    st, _ = evolve(product_plus_x(inst2.lattice), sched, inst2, 1.0, 0.01, 4, 0.01)
    sv = exact_evolve(StateVector.plus_x(8), sched, inst2, 1.0, 0.01, 0.01)
    assert fidelity(_sv(st), sv) > 1 - 1e-10


def test_frozen_schedule_is_identity(inst2, rng):
    sched = AnnealSchedule([0.0, 1.0], [0.0, 0.0], [0.0, 0.0])
    st = random_peps(inst2.lattice, 2, rng)
    ref = _sv(st)
    step = make_step(sched, inst2, 0.5, 0.01)
    trotter_sweep(st, step, 2)
    assert np.max(np.abs(_sv(st).amplitudes - ref.amplitudes)) < 1e-12


def test_small_dt_tracks_oracle(inst2):
    sched = default_schedule()
    st, log = evolve(product_plus_x(inst2.lattice), sched, inst2, 1.0, 0.001, 4, 0.1)
    assert len(log.s) == 100
    sv = exact_evolve(StateVector.plus_x(8), sched, inst2, 1.0, 0.001, 0.1)
    assert fidelity(_sv(st), sv) > 0.999


def test_step_reversibility(inst2):
    sched = default_schedule()
    st = product_plus_x(inst2.lattice)
    trotter_sweep(st, make_step(sched, inst2, 0.3, 0.01), 4)
    ref = _sv(st)
    trotter_sweep(st, make_step(sched, inst2, 0.3, 0.002), 4)
    trotter_sweep(st, make_step(sched, inst2, 0.3, -0.002), 4)
    assert fidelity(_sv(st), ref) > 1 - 1e-6


def test_sudden_quench(inst2):
    st, log = evolve(product_plus_x(inst2.lattice), default_schedule(), inst2, 0.01, 0.01, 4, 1.0)
    assert len(log.s) == 1
    assert fidelity(_sv(st), StateVector.plus_x(8)) > 0.99


def test_evolved_correlators(evolved2, inst2):
    st, sv = evolved2
    ours = exact_bond_correlators(_sv(st), inst2)
    assert np.max(np.abs(ours - exact_bond_correlators(sv, inst2))) < 1e-3


def test_trotter_gap_second_order(inst2):
    sched = default_schedule()
    start = StateVector.plus_x(8)
    ref = exact_evolve(start, sched, inst2, 1.0, 0.02 / 32, 0.6)

    def gap(dt):
        return np.sqrt(1 - fidelity(exact_evolve(start, sched, inst2, 1.0, dt, 0.6), ref))

    ratio = gap(0.02) / gap(0.01)
    assert 2.0 < ratio < 8.0


def test_truncate_all_noop_and_product(evolved2, inst2):
    st = evolved2[0].copy()
    dims = st.bond_dims
    _, reps = truncate_all(st, max(dims.values()))
    assert reps == [] and st.bond_dims == dims
    prod = product_plus_x(inst2.lattice)
    _, reps = truncate_all(prod, 1)
    assert reps == [] and fidelity(_sv(prod), StateVector.plus_x(8)) == pytest.approx(1.0)


def test_truncate_all_fidelity_drop(evolved2):
    full = evolved2[0]
    cut, reps = truncate_all(full.copy(), full.max_bond_dim - 1)
    assert cut.max_bond_dim == full.max_bond_dim - 1
    assert reps and all(r.local_fidelity_loss >= 0 for r in reps)
    a = peps_to_statevector(full)[0].amplitudes
    b = peps_to_statevector(cut)[0].amplitudes
    direct = 1 - abs(np.vdot(b, a)) ** 2 / (np.vdot(a, a).real * np.vdot(b, b).real)
    drop = 1 - fidelity(b, a)
    assert abs(drop - direct) < 1e-10
    assert 0 < drop < 0.05


def test_apply_step_custom_layers(inst2):
    # a single field layer of angle pi/4 on every site maps |+> to itself up to phase
    step = TrotterStep(0.1, 0.0, 1.0, 0.0, (GateLayer("field", tuple(range(8)), (np.pi / 4,) * 8),))
    out = apply_step(StateVector.plus_x(8), step, inst2)
    assert fidelity(out, StateVector.plus_x(8)) == pytest.approx(1.0)


def test_checkpoint_roundtrip(tmp_path, evolved2):
    st = evolved2[0]
    save_checkpoint(tmp_path / "c.npz", st, 0.6, {"t_a": 1.0})
    back, header = load_checkpoint(tmp_path / "c.npz")
    assert header["s"] == 0.6 and header["meta"]["t_a"] == 1.0
    assert back.log_scale == st.log_scale
    for a, b in zip(st.tensors, back.tensors):
        np.testing.assert_array_equal(a, b)


def test_checkpoint_rejects_foreign_file(tmp_path):
    np.savez(tmp_path / "x.npz", header=np.array('{"format": "other"}'))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x.npz")


def test_evolve_rejects_bad_s_end(inst2):
    with pytest.raises(ValueError):
        evolve(product_plus_x(inst2.lattice), default_schedule(), inst2, 1.0, 0.01, 2, 1.5)
