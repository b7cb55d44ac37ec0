"""Finite open-boundary 3D PEPS and its Trotterized real-time evolution.

Site tensors have index order ``(p, -x, +x, -y, +y, -z, +z)``; bonds that
leave the lattice have dimension 1.  Two-site Ising gates double the shared
bond, which is cut back with the neighbourhood tensor update (NTU): the
truncation minimises the error in a metric assembled from the tensors
around the bond.  See ``docs/ntu_neighbourhood.md`` for the neighbourhood
and the loop cuts used.
"""

from __future__ import annotations

import io
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .model import AnnealSchedule, CubicLattice, DisorderInstance
from .tensor import DTYPE, svd_truncate
from .trotter import TrotterStep, make_step, step_plan

__all__ = [
    "Peps3D",
    "NtuReport",
    "EvolutionLog",
    "leg",
    "product_plus_x",
    "product_state",
    "random_peps",
    "apply_field_gate",
    "apply_ising_gate",
    "ntu_truncate",
    "ntu_metric",
    "trotter_sweep",
    "evolve",
    "truncate_all",
    "save_checkpoint",
    "load_checkpoint",
]

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
EIG_FLOOR = 1e-12
SX = np.array([[0, 1], [1, 0]], dtype=DTYPE)
SZ = np.array([1.0, -1.0])


def leg(direction: int, sign: int) -> int:
    """Tensor axis of the bond along ``sign * e_direction``."""
    return 1 + 2 * direction + (1 if sign > 0 else 0)


def _opposite(ax: int) -> int:
    return ax + 1 if ax % 2 == 1 else ax - 1


class Peps3D:
    """Open-boundary PEPS with one rank-7 tensor per site.

    ``log_scale`` holds a factor ``exp(log_scale)`` pulled out of the
    tensors to keep their entries of order one.
    """

    def __init__(self, lattice: CubicLattice, tensors, log_scale: float = 0.0):
        self.lattice = lattice
        self.tensors = [np.asarray(t, dtype=DTYPE) for t in tensors]
        self.log_scale = float(log_scale)
        self.check()

    def check(self):
        lat = self.lattice
        if len(self.tensors) != lat.n_sites:
            raise ValueError("one tensor per site required")
        for i, t in enumerate(self.tensors):
            if t.ndim != 7 or t.shape[0] != 2:
                raise ValueError(f"site {i}: expected rank-7 tensor with physical dimension 2")
            for mu in range(3):
                for sgn in (-1, 1):
                    if lat.neighbor(i, mu, sgn) is None and t.shape[leg(mu, sgn)] != 1:
                        raise ValueError(f"site {i}: boundary leg {mu},{sgn} must have dimension 1")
        for bd in lat.bonds:
            da = self.tensors[bd.a].shape[leg(bd.direction, 1)]
            db = self.tensors[bd.b].shape[leg(bd.direction, -1)]
            if da != db:
                raise ValueError(f"bond {bd}: dimensions {da} != {db}")

    def copy(self) -> "Peps3D":
        return Peps3D(self.lattice, [t.copy() for t in self.tensors], self.log_scale)

    def bond_dim(self, k: int) -> int:
        bd = self.lattice.bonds[k]
        return self.tensors[bd.a].shape[leg(bd.direction, 1)]

    @property
    def bond_dims(self) -> dict:
        return {k: self.bond_dim(k) for k in range(self.lattice.n_bonds)}

    @property
    def max_bond_dim(self) -> int:
        return max(self.bond_dims.values(), default=1)

    def permuted(self, perm) -> "Peps3D":
        """Relabel the lattice axes so that new axis ``k`` is old axis ``perm[k]``."""
        perm = tuple(perm)
        old = self.lattice
        new = CubicLattice(tuple(old.shape[p] for p in perm))
        axes = [0]
        for k in range(3):
            axes += [leg(perm[k], -1), leg(perm[k], 1)]
        tensors = []
        for i in range(new.n_sites):
            c = new.coord(i)
            oc = [0, 0, 0]
            for k in range(3):
                oc[perm[k]] = c[k]
            tensors.append(np.transpose(self.tensors[old.index(oc)], axes))
        return Peps3D(new, tensors, self.log_scale)


@dataclass
class NtuReport:
    bond: int
    pre_dim: int
    post_dim: int
    local_fidelity_loss: float
    svd1_used: bool
    regularized: bool = False


@dataclass
class EvolutionLog:
    s: list = field(default_factory=list)
    max_loss: list = field(default_factory=list)
    total_loss: list = field(default_factory=list)

    def record(self, s_value, reports):
        losses = [r.local_fidelity_loss for r in reports] or [0.0]
        self.s.append(float(s_value))
        self.max_loss.append(float(max(losses)))
        self.total_loss.append(float(sum(losses)))

    def to_dict(self):
        return {"s": self.s, "max_loss": self.max_loss, "total_loss": self.total_loss}


def product_state(lattice: CubicLattice, vectors) -> Peps3D:
    """Product state with one physical 2-vector per site (or one for all)."""
    vectors = np.asarray(vectors, dtype=DTYPE)
    if vectors.ndim == 1:
        vectors = np.broadcast_to(vectors, (lattice.n_sites, 2))
    return Peps3D(lattice, [v.reshape(2, 1, 1, 1, 1, 1, 1).copy() for v in vectors])


def product_plus_x(lattice: CubicLattice) -> Peps3D:
    """Every spin in the +1 eigenstate of sigma^x."""
    return product_state(lattice, np.array([1.0, 1.0]) / np.sqrt(2.0))


def random_peps(lattice: CubicLattice, D: int, rng: np.random.Generator) -> Peps3D:
    """Random complex PEPS with all internal bonds of dimension ``D``."""
    tensors = []
    for i in range(lattice.n_sites):
        shape = [2]
        for mu in range(3):
            for sgn in (-1, 1):
                shape.append(D if lattice.neighbor(i, mu, sgn) is not None else 1)
        t = rng.normal(size=shape) + 1j * rng.normal(size=shape)
        tensors.append(t / np.linalg.norm(t))
    return Peps3D(lattice, tensors)


def apply_field_gate(state: Peps3D, site: int, theta: float) -> Peps3D:
    """Multiply the physical index of ``site`` by ``exp(+i theta X)`` in place."""
    u = np.cos(theta) * np.eye(2, dtype=DTYPE) + 1j * np.sin(theta) * SX
    state.tensors[site] = np.tensordot(u, state.tensors[site], axes=(1, 0))
    return state


def ising_gate_factors(phi: float):
    """Rank-2 split ``exp(-i phi ZZ) = sum_g a_g (x) a_g`` with ``a_g`` diagonal.

    Returns an array ``f[g, k]`` with ``exp(-i phi s_k s_l) = sum_g f[g,k] f[g,l]``.
    """
    c = np.sqrt(complex(np.cos(phi)))
    s = np.sqrt(complex(-1j * np.sin(phi)))
    return np.array([[c, c], [s, -s]], dtype=DTYPE)


def apply_ising_gate(state: Peps3D, bond: int, phi: float) -> Peps3D:
    """Absorb ``exp(-i phi ZZ)`` on ``bond``; the shared dimension doubles. In place."""
    bd = state.lattice.bonds[bond]
    la, lb = leg(bd.direction, 1), leg(bd.direction, -1)
    f = ising_gate_factors(phi)
    A, B = state.tensors[bd.a], state.tensors[bd.b]
    state.tensors[bd.a] = _split_leg(A, la, f)
    state.tensors[bd.b] = _split_leg(B, lb, f)
    return state


def _split_leg(T, ax, f):
    # T[p, ..., c, ...] * f[g, p] -> leg ax becomes (c, g)
    t = np.moveaxis(T, ax, -1)[..., None] * np.moveaxis(f, 0, -1).reshape((2,) + (1,) * (T.ndim - 1) + (2,))
    t = t.reshape(t.shape[:-2] + (t.shape[-2] * 2,))
    return np.moveaxis(t, -1, ax)


# ---------------------------------------------------------------------------
# NTU metric
# ---------------------------------------------------------------------------


def _double_open(T, open_axes):
    """Contract ``T`` with ``conj(T)`` over every axis not in ``open_axes``.

    Result axes: ``(o1, o1*, o2, o2*, ...)``.
    """
    others = [a for a in range(T.ndim) if a not in open_axes]
    d = np.tensordot(T, T.conj(), axes=(others, others))
    n = len(open_axes)
    rank = sorted(open_axes)
    order = []
    for a in open_axes:
        k = rank.index(a)
        order += [k, n + k]
    return d.transpose(order)


def _psd(E):
    E = 0.5 * (E + E.conj().T)
    w, v = np.linalg.eigh(E)
    w = np.clip(w, 0.0, None)
    if w.max(initial=0.0) <= 0:
        return np.eye(E.shape[0], dtype=DTYPE)
    E = (v * w) @ v.conj().T
    return E / np.trace(E).real


def _leg_environments(state: Peps3D, bond: int, neighborhood: str):
    """PSD ket-bra environments on the outer legs of both bond sites.

    Returns ``(envA, envB, svd1_used)`` where ``envX`` maps axis -> matrix.
    """
    lat = state.lattice
    bd = lat.bonds[bond]
    mu = bd.direction
    T = state.tensors
    envA, envB = {}, {}
    used = False
    for site, env, skip in ((bd.a, envA, leg(mu, 1)), (bd.b, envB, leg(mu, -1))):
        for mu2 in range(3):
            for sgn in (-1, 1):
                ax = leg(mu2, sgn)
                if ax == skip or ax in env:
                    continue
                n = lat.neighbor(site, mu2, sgn)
                if n is None:
                    env[ax] = np.ones((1, 1), dtype=DTYPE)
                elif mu2 == mu or neighborhood == "a":
                    env[ax] = _psd(_double_open(T[n], [_opposite(ax)]))
    if neighborhood == "b":
        for mu2 in range(3):
            if mu2 == mu:
                continue
            for sgn in (-1, 1):
                na = lat.neighbor(bd.a, mu2, sgn)
                nb = lat.neighbor(bd.b, mu2, sgn)
                ax = leg(mu2, sgn)
                if na is None or nb is None:
                    continue
                # plaquette a - na - nb - b closed by the bond na-nb; cut it to rank one
                Dn = _double_open(T[na], [_opposite(ax), leg(mu, 1)])
                Dm = _double_open(T[nb], [_opposite(ax), leg(mu, -1)])
                K = np.tensordot(Dn, Dm, axes=([2, 3], [2, 3]))
                da, db = K.shape[0], K.shape[2]
                K = K.reshape(da * da, db * db)
                try:
                    r = svd_truncate(K, [0], max_rank=1)
                except ValueError:
                    envA[ax] = np.eye(da, dtype=DTYPE) / da
                    envB[ax] = np.eye(db, dtype=DTYPE) / db
                    continue
                u = r.left[:, 0].reshape(da, da)
                v = r.right[0].reshape(db, db)
                ph = np.trace(u)
                ph = ph / abs(ph) if abs(ph) > 0 else 1.0
                envA[ax] = _psd(u / ph)
                envB[ax] = _psd(v * ph)
                used = True
    return envA, envB, used


def _reduced_metric(Q, env, skip_axis):
    """``g[r, r'] = sum Q[..i.., r] E[i, i'] conj(Q[..i'.., r'])`` over the outer legs."""
    QE = Q
    for ax, E in env.items():
        a = ax if ax < skip_axis else ax - 1
        QE = np.moveaxis(np.tensordot(QE, E, axes=(a, 0)), -1, a)
    axes = list(range(Q.ndim - 1))
    g = np.tensordot(QE, Q.conj(), axes=(axes, axes))
    return 0.5 * (g + g.conj().T)


def _reduce(T, ax):
    """QR split ``T = Q . R`` across axis ``ax``; ``Q`` keeps all other axes."""
    t = np.moveaxis(T, ax, -1)
    shp = t.shape
    m = t.reshape(-1, shp[-1])
    q, r = np.linalg.qr(m)
    return q.reshape(shp[:-1] + (q.shape[1],)), r


def ntu_metric(state: Peps3D, bond: int, neighborhood: str = "b"):
    """Assemble the NTU metric for ``bond``.

    Returns ``(gA, gB, QA, RA, QB, RB, svd1_used)``; the full metric on the
    bond matrix ``M = RA @ RB.T`` is the Kronecker product ``gA (x) gB``.
    """
    bd = state.lattice.bonds[bond]
    la, lb = leg(bd.direction, 1), leg(bd.direction, -1)
    envA, envB, used = _leg_environments(state, bond, neighborhood)
    QA, RA = _reduce(state.tensors[bd.a], la)
    QB, RB = _reduce(state.tensors[bd.b], lb)
    envA = {ax: E for ax, E in envA.items() if ax != 0}
    envB = {ax: E for ax, E in envB.items() if ax != 0}
    gA = _reduced_metric(QA, envA, la)
    gB = _reduced_metric(QB, envB, lb)
    return gA, gB, QA, RA, QB, RB, used


def _sqrt_metric(g):
    w, v = np.linalg.eigh(g)
    wmax = max(float(w.max()), 0.0)
    floor = EIG_FLOOR * wmax if wmax > 0 else 1.0
    regularized = bool(np.any(w < floor))
    w = np.maximum(w, floor)
    return v, np.sqrt(w), regularized


def ntu_truncate(state: Peps3D, bond: int, target_D: int, neighborhood: str = "b"):
    """Cut ``bond`` to at most ``target_D`` in the NTU metric. In place.

    Returns ``(state, NtuReport)``.  When the bond is already small enough
    only exactly vanishing singular values are removed.
    """
    bd = state.lattice.bonds[bond]
    la, lb = leg(bd.direction, 1), leg(bd.direction, -1)
    pre = state.bond_dim(bond)
    if pre <= target_D:
        QA, RA = _reduce(state.tensors[bd.a], la)
        QB, RB = _reduce(state.tensors[bd.b], lb)
        M = RA @ RB.T
        r = svd_truncate(M, [0], cutoff=1e-14)
        X, Y = r.left * np.sqrt(r.singular_values), np.sqrt(r.singular_values)[:, None] * r.right
        loss, used, regularized = 0.0, False, False
        scale = 1.0
    else:
        gA, gB, QA, RA, QB, RB, used = ntu_metric(state, bond, neighborhood)
        M = RA @ RB.T
        vA, sA, regA = _sqrt_metric(gA)
        vB, sB, regB = _sqrt_metric(gB)
        regularized = regA or regB
        # ||S_A^T (M - XY) S_B||  with  g = S S^H,  S = v diag(sqrt w)
        Mt = (sA[:, None] * (vA.T @ M @ vB)) * sB[None, :]
        r = svd_truncate(Mt, [0], max_rank=target_D)
        s2 = np.sum(np.abs(Mt) ** 2)
        kept = np.sum(r.singular_values**2)
        loss = float(max(s2 - kept, 0.0) / s2) if s2 > 0 else 0.0
        Xt = r.left * r.singular_values
        X = vA.conj() @ (Xt / sA[:, None])
        Y = (r.right / sB[None, :]) @ vB.conj().T
        # balanced gauge on the new bond
        r2 = svd_truncate(X @ Y, [0], max_rank=target_D, cutoff=1e-14)
        sq = np.sqrt(r2.singular_values)
        X, Y = r2.left * sq, sq[:, None] * r2.right
        scale = 1.0
    # keep entries O(1): pull the largest singular value into log_scale
    smax = float(np.max(np.abs(X))) * float(np.max(np.abs(Y)))
    if smax > 0:
        scale = np.sqrt(smax)
        X = X / scale
        Y = Y / scale
        state.log_scale += 2.0 * np.log(scale)
    A = np.tensordot(QA, X, axes=(QA.ndim - 1, 0))
    B = np.tensordot(QB, Y.T, axes=(QB.ndim - 1, 0))
    state.tensors[bd.a] = np.moveaxis(A, -1, la)
    state.tensors[bd.b] = np.moveaxis(B, -1, lb)
    report = NtuReport(bond, pre, X.shape[1], loss, used, regularized)
    return state, report


# ---------------------------------------------------------------------------
# Evolution
# ---------------------------------------------------------------------------


def trotter_sweep(state: Peps3D, step: TrotterStep, D_e: int, neighborhood: str = "b"):
    """Apply one second-order Trotter step, truncating every bond to ``D_e``. In place."""
    reports = []
    for layer in step.layers:
        if layer.kind == "field":
            for site, theta in zip(layer.items, layer.angles):
                if theta != 0.0:
                    apply_field_gate(state, site, theta)
        else:
            for bond, phi in zip(layer.items, layer.angles):
                if phi == 0.0:
                    continue
                apply_ising_gate(state, bond, phi)
                _, rep = ntu_truncate(state, bond, D_e, neighborhood)
                reports.append(rep)
    return state, reports


def evolve(state: Peps3D, schedule: AnnealSchedule, instance: DisorderInstance, t_a: float, dt: float,
           D_e: int, s_end: float = 0.6, neighborhood: str = "b", s_start: float = 0.0, callback=None):
    """Ramp ``s`` from ``s_start`` to ``s_end`` in steps of ``dt / t_a``.

    Consecutive steps alternate the order of the Ising bond groups.
    Returns ``(state, EvolutionLog)``.
    """
    if not 0.0 < s_end <= 1.0:
        raise ValueError("s_end must lie in (0, 1]")
    history = EvolutionLog()
    for n, (s_mid, h) in enumerate(step_plan(t_a, dt, s_end, s_start)):
        step = make_step(schedule, instance, s_mid, h, reverse_groups=bool(n % 2))
        _, reports = trotter_sweep(state, step, D_e, neighborhood)
        history.record(s_mid + 0.5 * h / t_a, reports)
        if callback is not None:
            callback(n, state, history)
    return state, history


def truncate_all(state: Peps3D, D_t: int, neighborhood: str = "b"):
    """Cut every bond larger than ``D_t`` with the NTU procedure. In place.

    Returns ``(state, reports)``.
    """
    reports = []
    for k in range(state.lattice.n_bonds):
        if state.bond_dim(k) > D_t:
            _, rep = ntu_truncate(state, k, D_t, neighborhood)
            reports.append(rep)
    return state, reports


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, state: Peps3D, s: float = 0.0, meta: dict | None = None):
    """Write a versioned ``.npz`` container with a JSON header."""
    header = {
        "format": "kzpeps-checkpoint",
        "version": CHECKPOINT_VERSION,
        "shape": list(state.lattice.shape),
        "s": float(s),
        "log_scale": state.log_scale,
        "bond_dims": [state.bond_dim(k) for k in range(state.lattice.n_bonds)],
        "tensor_shapes": [list(t.shape) for t in state.tensors],
        "meta": meta or {},
    }
    arrays = {f"t{i}": t for i, t in enumerate(state.tensors)}
    buf = io.BytesIO()
    np.savez_compressed(buf, header=np.array(json.dumps(header)), **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Return ``(state, header)`` from :func:`save_checkpoint` output."""
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        if header.get("format") != "kzpeps-checkpoint" or header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint header {header.get('format')} v{header.get('version')}")
        lat = CubicLattice(tuple(header["shape"]))
        tensors = [z[f"t{i}"] for i in range(lat.n_sites)]
    return Peps3D(lat, tensors, header["log_scale"]), header
