"""Brute-force statevector engine for small lattices.

Basis states are indexed with site 0 as the most significant bit and bit
value 0 meaning sigma^z = +1, so ``amplitudes.reshape((2,) * n)`` has one
axis per site in lattice order.  Time stepping executes the same
:class:`~kzpeps.trotter.TrotterStep` objects as the PEPS engine.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import opt_einsum as oe
import scipy.sparse as sp

from .model import AnnealSchedule, DisorderInstance
from .peps import Peps3D, leg
from .tensor import DTYPE
from .trotter import TrotterStep, make_step, step_plan

__all__ = [
    "MAX_SPINS",
    "StateVector",
    "peps_to_statevector",
    "projected_amplitude",
    "spin_table",
    "apply_step",
    "exact_evolve",
    "exact_bond_correlators",
    "exact_config_probability",
    "exact_residual_energy",
    "hamiltonian",
    "fidelity",
]

MAX_SPINS = 24


class OracleSizeError(ValueError):
    pass


@dataclass
class StateVector:
    n_spins: int
    amplitudes: np.ndarray

    def __post_init__(self):
        if self.n_spins > MAX_SPINS:
            raise OracleSizeError(f"{self.n_spins} spins exceed the oracle limit of {MAX_SPINS}")
        self.amplitudes = np.asarray(self.amplitudes, dtype=DTYPE).reshape(-1)
        if self.amplitudes.size != 1 << self.n_spins:
            raise ValueError("amplitude vector has the wrong length")

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def normalized(self) -> "StateVector":
        return StateVector(self.n_spins, self.amplitudes / self.norm)

    def copy(self) -> "StateVector":
        return StateVector(self.n_spins, self.amplitudes.copy())

    @classmethod
    def product(cls, vectors) -> "StateVector":
        vectors = np.asarray(vectors, dtype=DTYPE)
        psi = np.ones(1, dtype=DTYPE)
        for v in vectors:
            psi = np.kron(psi, v)
        return cls(len(vectors), psi)

    @classmethod
    def plus_x(cls, n: int) -> "StateVector":
        return cls.product(np.full((n, 2), 1 / np.sqrt(2)))


def _peps_sublists(state: Peps3D, config=None):
    lat = state.lattice
    n = lat.n_sites
    bond_label = {}
    nxt = n
    ops = []
    for i in range(n):
        labels = [i]
        for mu in range(3):
            for sgn in (-1, 1):
                nb = lat.neighbor(i, mu, sgn)
                if nb is None:
                    labels.append(nxt)
                    nxt += 1
                else:
                    key = (min(i, nb), max(i, nb))
                    if key not in bond_label:
                        bond_label[key] = nxt
                        nxt += 1
                    labels.append(bond_label[key])
        T = state.tensors[i]
        if config is not None:
            T = T[int(config[i])]
            labels = labels[1:]
        ops += [T, labels]
    return ops


def peps_to_statevector(state: Peps3D):
    """Contract the whole network.

    Returns ``(normalized StateVector, raw norm)``; the raw norm includes
    ``exp(state.log_scale)``.
    """
    n = state.lattice.n_sites
    if n > MAX_SPINS:
        raise OracleSizeError(f"{n} spins exceed the oracle limit of {MAX_SPINS}")
    ops = _peps_sublists(state)
    psi = oe.contract(*ops, list(range(n)), optimize="greedy").reshape(-1)
    norm = float(np.linalg.norm(psi))
    raw = norm * float(np.exp(state.log_scale))
    return StateVector(n, psi / norm), raw


def projected_amplitude(state: Peps3D, config) -> complex:
    """Amplitude of one configuration from the projected network (with scale)."""
    ops = _peps_sublists(state, config)
    return complex(oe.contract(*ops, [], optimize="greedy")) * float(np.exp(state.log_scale))


def spin_table(n: int) -> np.ndarray:
    """``s[c, i]`` = sigma^z eigenvalue of site i in basis state c (int8)."""
    idx = np.arange(1 << n, dtype=np.int64)
    bits = (idx[:, None] >> np.arange(n - 1, -1, -1)) & 1
    return (1 - 2 * bits).astype(np.int8)


class _Diagonals:
    """Cached Ising diagonals per bond group."""

    def __init__(self, instance: DisorderInstance):
        self.instance = instance
        self.n = instance.lattice.n_sites
        self._zz = {}

    def zz(self, bond: int) -> np.ndarray:
        if bond not in self._zz:
            bd = self.instance.lattice.bonds[bond]
            idx = np.arange(1 << self.n, dtype=np.int64)
            za = 1 - 2 * ((idx >> (self.n - 1 - bd.a)) & 1)
            zb = 1 - 2 * ((idx >> (self.n - 1 - bd.b)) & 1)
            v = (za * zb).astype(np.int8)
            if self.n > 20:
                return v
            self._zz[bond] = v
        return self._zz[bond]


def _apply_field_all(psi, n, theta):
    c, s = np.cos(theta), 1j * np.sin(theta)
    t = psi.reshape((2,) * n)
    for ax in range(n):
        t0 = np.take(t, 0, axis=ax)
        t1 = np.take(t, 1, axis=ax)
        t = np.stack([c * t0 + s * t1, s * t0 + c * t1], axis=ax)
    return t.reshape(-1)


def apply_step(sv: StateVector, step: TrotterStep, instance: DisorderInstance, _diag=None) -> StateVector:
    """Execute one gate sequence exactly."""
    diag = _diag or _Diagonals(instance)
    psi = sv.amplitudes
    n = sv.n_spins
    for layer in step.layers:
        if layer.kind == "field":
            thetas = set(layer.angles)
            if len(thetas) == 1 and len(layer.items) == n:
                psi = _apply_field_all(psi, n, thetas.pop())
            else:
                for site, theta in zip(layer.items, layer.angles):
                    t = psi.reshape((2,) * n)
                    u = np.array([[np.cos(theta), 1j * np.sin(theta)], [1j * np.sin(theta), np.cos(theta)]])
                    t = np.moveaxis(np.tensordot(u, t, axes=(1, site)), 0, site)
                    psi = t.reshape(-1)
        else:
            phase = np.zeros(psi.size)
            for bond, phi in zip(layer.items, layer.angles):
                phase += phi * diag.zz(bond)
            psi = psi * np.exp(-1j * phase)
    return StateVector(n, psi)


def exact_evolve(sv: StateVector, schedule: AnnealSchedule, instance: DisorderInstance, t_a: float, dt: float,
                 s_end: float = 0.6, s_start: float = 0.0) -> StateVector:
    """Step-wise propagation with the same split and step plan as :func:`kzpeps.peps.evolve`."""
    diag = _Diagonals(instance)
    for n, (s_mid, h) in enumerate(step_plan(t_a, dt, s_end, s_start)):
        step = make_step(schedule, instance, s_mid, h, reverse_groups=bool(n % 2))
        sv = apply_step(sv, step, instance, diag)
    return sv


def exact_bond_correlators(sv: StateVector, instance_or_lattice) -> np.ndarray:
    """Exact <Z_a Z_b> for every bond (lattice bond order)."""
    lat = getattr(instance_or_lattice, "lattice", instance_or_lattice)
    p = np.abs(sv.amplitudes) ** 2
    p = p / p.sum()
    n = sv.n_spins
    idx = np.arange(1 << n, dtype=np.int64)
    out = np.empty(lat.n_bonds)
    for k, bd in enumerate(lat.bonds):
        za = 1 - 2 * ((idx >> (n - 1 - bd.a)) & 1)
        zb = 1 - 2 * ((idx >> (n - 1 - bd.b)) & 1)
        out[k] = float(p @ (za * zb))
    return out


def exact_config_probability(sv: StateVector, config) -> float:
    """``|psi(config)|^2 / <psi|psi>``."""
    config = np.asarray(config, dtype=np.int64)
    idx = int(np.sum(config << np.arange(sv.n_spins - 1, -1, -1)))
    return float(np.abs(sv.amplitudes[idx]) ** 2 / np.sum(np.abs(sv.amplitudes) ** 2))


def exact_residual_energy(sv: StateVector, instance: DisorderInstance, ground) -> float:
    corr = exact_bond_correlators(sv, instance)
    return float(np.dot(instance.couplings, corr - ground.correlators) / instance.n_bonds)


def hamiltonian(instance: DisorderInstance, gamma: float, j: float):
    """Sparse ``gamma * (-sum X) + j * sum J ZZ``."""
    n = instance.lattice.n_sites
    dim = 1 << n
    diag = np.zeros(dim)
    d = _Diagonals(instance)
    for k, J in enumerate(instance.couplings):
        diag += J * d.zz(k)
    H = sp.diags(j * diag).tocsr().astype(DTYPE)
    idx = np.arange(dim, dtype=np.int64)
    for i in range(n):
        flip = idx ^ (1 << (n - 1 - i))
        H = H - gamma * sp.csr_matrix((np.ones(dim), (idx, flip)), shape=(dim, dim))
    return H


def fidelity(a, b) -> float:
    """``|<a|b>|^2 / (<a|a><b|b>)`` for statevectors or raw arrays."""
    va = getattr(a, "amplitudes", a)
    vb = getattr(b, "amplitudes", b)
    return float(np.abs(np.vdot(va, vb)) ** 2 / (np.vdot(va, va).real * np.vdot(vb, vb).real))
