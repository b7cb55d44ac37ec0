"""Lattice geometry, bond disorder, annealing schedule and the classical ground state."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.interpolate import PchipInterpolator

__all__ = [
    "Bond",
    "CubicLattice",
    "DisorderInstance",
    "AnnealSchedule",
    "GroundReference",
    "make_rng",
    "generate_disorder",
    "default_schedule",
    "constant_schedule",
    "load_schedule",
    "schedule_at",
    "ising_energies",
    "classical_ground",
]

RNG_NAME = "numpy.random.Philox"
AXES = "xyz"


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator used for every seeded draw in the package."""
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


class Bond(NamedTuple):
    """Nearest-neighbour bond ``a -> b`` with ``b = a + e_direction``."""

    a: int
    b: int
    direction: int


class CubicLattice:
    """Open-boundary rectangular lattice of ``Lx x Ly x Lz`` sites.

    Sites are numbered in C order of ``(x, y, z)``; the same numbering is the
    axis order of the statevector used by :mod:`kzpeps.oracle`.  Bonds are
    ordered by direction first and by the lower site second.
    """

    def __init__(self, shape):
        if isinstance(shape, (int, np.integer)):
            shape = (int(shape),) * 3
        shape = tuple(int(n) for n in shape)
        if len(shape) != 3 or min(shape) < 1:
            raise ValueError(f"invalid lattice shape {shape}")
        self.shape = shape

    def __repr__(self):
        return f"CubicLattice({self.shape})"

    def __eq__(self, other):
        return isinstance(other, CubicLattice) and other.shape == self.shape

    def __hash__(self):
        return hash(self.shape)

    @property
    def L(self) -> int:
        return max(self.shape)

    @property
    def n_sites(self) -> int:
        return int(np.prod(self.shape))

    def index(self, coord) -> int:
        return int(np.ravel_multi_index(tuple(coord), self.shape))

    def coord(self, i: int) -> tuple[int, int, int]:
        return tuple(int(c) for c in np.unravel_index(i, self.shape))

    def sites(self):
        return [self.coord(i) for i in range(self.n_sites)]

    def neighbor(self, i: int, direction: int, sign: int = 1):
        """Index of the neighbour of site ``i`` along ``sign * e_direction``, or None."""
        c = list(self.coord(i))
        c[direction] += sign
        if 0 <= c[direction] < self.shape[direction]:
            return self.index(c)
        return None

    @cached_property
    def bonds(self) -> list[Bond]:
        out = []
        for mu in range(3):
            for a in range(self.n_sites):
                b = self.neighbor(a, mu)
                if b is not None:
                    out.append(Bond(a, b, mu))
        return out

    @property
    def n_bonds(self) -> int:
        return len(self.bonds)

    @cached_property
    def bond_index(self) -> dict:
        return {(bd.a, bd.b): k for k, bd in enumerate(self.bonds)}

    def bond_between(self, a: int, b: int) -> int:
        if (a, b) in self.bond_index:
            return self.bond_index[(a, b)]
        return self.bond_index[(b, a)]


@dataclass
class DisorderInstance:
    """Lattice with one real coupling per bond (ordered as ``lattice.bonds``)."""

    lattice: CubicLattice
    couplings: np.ndarray
    seed: int | None = None
    rng: str = RNG_NAME

    def __post_init__(self):
        self.couplings = np.asarray(self.couplings, dtype=float)
        if self.couplings.shape != (self.lattice.n_bonds,):
            raise ValueError("one coupling per bond required")

    @property
    def n_bonds(self) -> int:
        return self.lattice.n_bonds

    def to_json(self) -> dict:
        return {
            "shape": list(self.lattice.shape),
            "seed": self.seed,
            "rng": self.rng,
            "couplings": [
                {"i": bd.a, "j": bd.b, "direction": AXES[bd.direction], "J": float(J)}
                for bd, J in zip(self.lattice.bonds, self.couplings)
            ],
        }

    @classmethod
    def from_json(cls, data: dict) -> "DisorderInstance":
        lat = CubicLattice(tuple(data["shape"]))
        J = np.zeros(lat.n_bonds)
        seen = np.zeros(lat.n_bonds, dtype=bool)
        for entry in data["couplings"]:
            k = lat.bond_between(int(entry["i"]), int(entry["j"]))
            J[k] = float(entry["J"])
            seen[k] = True
        if not seen.all():
            raise ValueError("coupling list does not cover every bond")
        return cls(lat, J, data.get("seed"), data.get("rng", RNG_NAME))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "DisorderInstance":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def generate_disorder(L, seed: int) -> DisorderInstance:
    """Couplings drawn i.i.d. uniform on [-1, 1] from a Philox stream.

    ``L`` is either a linear size or a shape tuple.
    """
    lat = CubicLattice(L)
    if lat.L < 2:
        raise ValueError("lattice size must be at least 2")
    J = make_rng(seed).uniform(-1.0, 1.0, size=lat.n_bonds)
    return DisorderInstance(lat, J, int(seed))


@dataclass
class AnnealSchedule:
    """Tabulated energy scales (GHz) of the driver and Ising terms versus s."""

    s: np.ndarray
    gamma: np.ndarray
    j: np.ndarray
    kind: str = "pchip"
    source: str = "table"

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=float)
        self.gamma = np.asarray(self.gamma, dtype=float)
        self.j = np.asarray(self.j, dtype=float)
        self.validate()
        if self.kind == "pchip":
            self._g = PchipInterpolator(self.s, self.gamma)
            self._j = PchipInterpolator(self.s, self.j)
        elif self.kind == "linear":
            self._g = lambda x: np.interp(x, self.s, self.gamma)
            self._j = lambda x: np.interp(x, self.s, self.j)
        else:
            raise ValueError(f"unknown interpolation {self.kind!r}")

    def validate(self):
        s = self.s
        if s.ndim != 1 or s.size < 2 or not (s.shape == self.gamma.shape == self.j.shape):
            raise ValueError("schedule needs at least two samples of (s, gamma, j)")
        if np.any(np.diff(s) <= 0):
            raise ValueError("schedule s values must be strictly increasing")
        if s[0] > 0 or s[-1] < 1 or s[0] < 0 or s[-1] > 1:
            raise ValueError("schedule must cover exactly s in [0, 1]")
        if np.any(self.gamma < 0) or np.any(self.j < 0):
            raise ValueError("schedule energies must be non-negative")

    def validate_ramp(self):
        """Check that the driver ramps down and the Ising scale ramps up from ~0."""
        if self.j[-1] <= self.j[0] or self.gamma[-1] >= self.gamma[0]:
            raise ValueError("schedule must ramp the driver down and the Ising scale up")
        if self.j[0] > 0.1 * self.j[-1]:
            raise ValueError("Ising scale should start near zero")
        return self

    def __call__(self, s: float):
        return schedule_at(self, s)

    def save_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["s", "gamma_ghz", "j_ghz"])
            for row in zip(self.s, self.gamma, self.j):
                w.writerow([repr(float(v)) for v in row])


def schedule_at(sched: AnnealSchedule, s: float):
    """Return ``(gamma, j)`` in GHz at ramp parameter ``s``."""
    if not 0.0 <= s <= 1.0:
        raise ValueError(f"ramp parameter {s} outside [0, 1]")
    k = np.searchsorted(sched.s, s)
    if k < sched.s.size and sched.s[k] == s:
        return float(sched.gamma[k]), float(sched.j[k])
    g = max(float(sched._g(s)), 0.0)
    j = max(float(sched._j(s)), 0.0)
    return g, j


def default_schedule(n: int = 101) -> AnnealSchedule:
    """Smooth stand-in for a hardware schedule (NOT hardware data).

    The driver scale decays from 6 GHz as ``6 exp(-8 s)`` and the Ising scale
    grows as ``4 s^2``, so the driver is negligible near ``s = 0.6`` and the
    Ising scale vanishes exactly at ``s = 0``.
    """
    s = np.linspace(0.0, 1.0, n)
    return AnnealSchedule(s, 6.0 * np.exp(-8.0 * s), 4.0 * s**2, source="builtin-substitute").validate_ramp()


def constant_schedule(gamma: float, j: float) -> AnnealSchedule:
    """Frozen Hamiltonian: the same energy scales at every s."""
    return AnnealSchedule([0.0, 1.0], [gamma, gamma], [j, j], kind="linear", source="constant")


def load_schedule(path, kind: str = "pchip") -> AnnealSchedule:
    """Read a ``s,gamma_ghz,j_ghz`` CSV file."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["s", "gamma_ghz", "j_ghz"]:
            raise ValueError("schedule CSV header must be s,gamma_ghz,j_ghz")
        rows = [(float(r["s"]), float(r["gamma_ghz"]), float(r["j_ghz"])) for r in reader]
    arr = np.array(rows, dtype=float)
    return AnnealSchedule(arr[:, 0], arr[:, 1], arr[:, 2], kind=kind, source=str(path)).validate_ramp()


@dataclass
class GroundReference:
    """Classical ground state of the Ising term."""

    energy: float
    energy_per_bond: float
    correlators: np.ndarray
    config: np.ndarray
    method: str
    certified: bool
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "energy": self.energy,
            "energy_per_bond": self.energy_per_bond,
            "correlators": [float(c) for c in self.correlators],
            "config": [int(c) for c in self.config],
            "method": self.method,
            "certified": self.certified,
            "meta": self.meta,
        }

    @classmethod
    def from_json(cls, data: dict) -> "GroundReference":
        return cls(float(data["energy"]), float(data["energy_per_bond"]), np.asarray(data["correlators"], float),
                   np.asarray(data["config"], np.int8), data["method"], bool(data["certified"]), data.get("meta", {}))


def _spins_from_index(idx, n):
    bits = (idx[:, None] >> np.arange(n - 1, -1, -1)) & 1
    return 1 - 2 * bits.astype(np.int8)


def ising_energies(instance: DisorderInstance, configs) -> np.ndarray:
    """Ising energy ``sum J_ij s_i s_j`` for an array of 0/1 configurations."""
    c = np.atleast_2d(np.asarray(configs))
    s = 1 - 2 * c.astype(np.int64)
    bonds = instance.lattice.bonds
    a = np.fromiter((bd.a for bd in bonds), int, len(bonds))
    b = np.fromiter((bd.b for bd in bonds), int, len(bonds))
    return (s[:, a] * s[:, b]) @ instance.couplings


def _exact_ground(instance, chunk=1 << 18):
    n = instance.lattice.n_sites
    bonds = instance.lattice.bonds
    a = np.array([bd.a for bd in bonds], dtype=int)
    b = np.array([bd.b for bd in bonds], dtype=int)
    best_e, best_idx = np.inf, 0
    for start in range(0, 1 << n, chunk):
        idx = np.arange(start, min(start + chunk, 1 << n), dtype=np.int64)
        s = _spins_from_index(idx, n)
        e = (s[:, a] * s[:, b]).astype(float) @ instance.couplings
        k = int(np.argmin(e))
        if e[k] < best_e - 1e-12:
            best_e, best_idx = float(e[k]), int(idx[k])
    conf = ((best_idx >> np.arange(n - 1, -1, -1)) & 1).astype(np.int8)
    return best_e, conf


def _neighbor_table(instance):
    n = instance.lattice.n_sites
    nbr = [[] for _ in range(n)]
    for bd, J in zip(instance.lattice.bonds, instance.couplings):
        nbr[bd.a].append((bd.b, J))
        nbr[bd.b].append((bd.a, J))
    width = max(len(v) for v in nbr) if n else 0
    idx = np.zeros((n, width), dtype=int)
    w = np.zeros((n, width))
    for i, v in enumerate(nbr):
        for k, (j, J) in enumerate(v):
            idx[i, k] = j
            w[i, k] = J
    return idx, w


def _annealed_ground(instance, restarts, sweeps, seed):
    """Single-spin-flip Metropolis over a geometric temperature ladder.

    The restarts run as independent replicas side by side; each replica is
    finished by a zero-temperature sweep.
    """
    rng = make_rng(seed)
    n = instance.lattice.n_sites
    idx, w = _neighbor_table(instance)
    s = rng.choice(np.array([-1, 1]), size=(restarts, n)).astype(float)
    temps = np.geomspace(3.0, 0.05, sweeps)
    rows = np.arange(restarts)
    for T in list(temps) + [0.0] * 3:
        order = rng.permutation(n)
        for i in order:
            field_ = (s[:, idx[i]] * w[i]).sum(axis=1)
            dE = -2.0 * s[:, i] * field_
            if T > 0:
                accept = (dE <= 0) | (rng.random(restarts) < np.exp(-np.clip(dE, 0, None) / T))
            else:
                accept = dE < 0
            s[rows[accept], i] *= -1
    conf = ((1 - s) // 2).astype(np.int8)
    e = ising_energies(instance, conf)
    # ties resolved by restart index
    k = int(np.lexsort((np.arange(restarts), np.round(e, 12)))[0])
    return float(e[k]), conf[k], e


def classical_ground(instance: DisorderInstance, budget: int = 16, sweeps: int = 2000, seed: int = 0,
                     exact_limit: int = 24) -> GroundReference:
    """Ground state of ``sum J_ij s_i s_j``.

    Lattices with at most ``exact_limit`` spins are enumerated exhaustively;
    larger ones use simulated annealing with ``budget`` restarts and the
    result is marked as uncertified.
    """
    n = instance.lattice.n_sites
    if n <= exact_limit:
        e, conf = _exact_ground(instance)
        method, certified, meta = "exact-enumeration", True, {}
    else:
        e, conf, all_e = _annealed_ground(instance, max(int(budget), 1), sweeps, seed)
        hits = int(np.sum(np.abs(all_e - e) < 1e-9))
        method, certified = "simulated-annealing", False
        meta = {"restarts": int(budget), "sweeps": sweeps, "seed": seed, "restarts_at_best": hits}
    s = 1 - 2 * conf.astype(int)
    bonds = instance.lattice.bonds
    corr = np.array([s[bd.a] * s[bd.b] for bd in bonds], dtype=float)
    return GroundReference(e, e / instance.n_bonds, corr, conf, method, certified, meta)
