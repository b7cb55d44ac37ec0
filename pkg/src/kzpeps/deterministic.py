"""Deterministic bond correlators on a finite open lattice.

The double-layer network <psi|psi> is contracted layer by layer along z.
An upper boundary ``U(z)`` holds layers ``z .. Lz-1`` and a lower boundary
``L(z)`` layers ``0 .. z-1``; both are 2D PEPS whose site tensors carry the
pair of open (ket, bra) legs facing the rest of the network and weight
vectors on their in-plane bonds.  A layer is absorbed ket half first and
bra half second, and after each half every in-plane bond is cut back to
``d`` with a simple-update projector pair.

The remaining planar network ``U(m) . L(m)`` is contracted with row
boundary MPS of bond dimension ``chi_final``.  Operator insertions reuse
the projectors recorded during the last absorption of a boundary, so an
impurity only changes the site tensors it touches and numerator and
denominator share every approximation.
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import DisorderInstance, GroundReference
from .peps import Peps3D
from .planar import StripEnv, einsum, trivial_mps, zipper_advance
from .simple_update import outer_legs, simple_update
from .tensor import DTYPE

__all__ = [
    "EvalSettings",
    "BoundaryPeps2D",
    "BoundaryTruncationWarning",
    "NumericalConsistencyError",
    "DetResult",
    "build_boundaries",
    "bond_correlators_det",
    "residual_energy",
    "residual_energy_det",
    "save_correlators",
]

log = logging.getLogger(__name__)

SZ = np.diag([1.0, -1.0]).astype(DTYPE)


class BoundaryTruncationWarning(RuntimeWarning):
    """Boundary truncation error above the configured threshold."""


class NumericalConsistencyError(ArithmeticError):
    pass


@dataclass
class EvalSettings:
    """Boundary dimension ``d``, final MPS dimension ``chi_final`` (default ``2 d**2``)
    and the alarm threshold on boundary truncation errors."""

    d: int = 7
    chi_final: int | None = None
    trunc_tol: float = 0.01

    def __post_init__(self):
        if self.chi_final is None:
            self.chi_final = 2 * self.d * self.d
        if self.d < 1 or self.chi_final < self.d:
            raise ValueError("need d >= 1 and chi_final >= d")


# ---------------------------------------------------------------------------
# boundary PEPS with simple-update truncation
# ---------------------------------------------------------------------------


@dataclass
class BoundaryPeps2D:
    """Partially contracted stack of layers.

    ``gammas[(x, y)]`` has axes ``(l, r, d, u, f_ket, f_bra)``;
    ``lam_x[(x, y)]`` weights the bond to ``(x+1, y)`` and ``lam_y[(x, y)]``
    the bond to ``(x, y+1)``.  ``side`` is ``"upper"`` or ``"lower"`` and
    ``layer`` the last absorbed layer (``None`` for the empty boundary).
    """

    shape: tuple
    side: str
    layer: int | None
    gammas: dict
    lam_x: dict
    lam_y: dict
    log_scale: float = 0.0
    trunc_errors: list = field(default_factory=list)
    _inputs: dict | None = None
    _stages: tuple = ()

    @property
    def max_trunc_error(self) -> float:
        return max(self.trunc_errors, default=0.0)

    @property
    def max_dim(self) -> int:
        dims = [v.size for v in self.lam_x.values()] + [v.size for v in self.lam_y.values()]
        return max(dims, default=1)

    @classmethod
    def empty(cls, shape, side):
        nx, ny = shape
        one = np.ones((1,) * 6, dtype=DTYPE)
        gam = {(x, y): one for x in range(nx) for y in range(ny)}
        lx = {(x, y): np.ones(1) for x in range(nx - 1) for y in range(ny)}
        ly = {(x, y): np.ones(1) for x in range(nx) for y in range(ny - 1)}
        return cls((nx, ny), side, None, gam, lx, ly)

    def _weights(self, xy):
        """Weight vectors on the four in-plane legs of a site (ones on edges)."""
        x, y = xy
        nx, ny = self.shape
        g = self.gammas[xy]
        return [
            self.lam_x[(x - 1, y)] if x > 0 else np.ones(g.shape[0]),
            self.lam_x[(x, y)] if x < nx - 1 else np.ones(g.shape[1]),
            self.lam_y[(x, y - 1)] if y > 0 else np.ones(g.shape[2]),
            self.lam_y[(x, y)] if y < ny - 1 else np.ones(g.shape[3]),
        ]

    def exported(self, xy, gamma=None):
        """Site tensor with ``sqrt`` of the bond weights on each in-plane leg."""
        g = self.gammas[xy] if gamma is None else gamma
        w = self._weights(xy)
        return g * outer_legs([np.sqrt(v) for v in w], g.ndim)

    def impurity(self, xy, op):
        """Site tensor of the last absorption with ``op`` acting on the ket."""
        if self._inputs is None:
            raise ValueError("boundary has no absorbed layer")
        T = self._inputs["ket"][xy]
        Timp = np.tensordot(op, T, axes=(1, 0))
        g = self._inputs["gamma"][xy]
        g = _merge_ket(g, Timp, self.side)
        g = _apply_projectors(g, self._stages[0].proj[xy]) / self._stages[0].scale[xy]
        g = _merge_bra(g, T.conj(), self.side)
        g = _apply_projectors(g, self._stages[1].proj[xy]) / self._stages[1].scale[xy]
        return self.exported(xy, g)


def _merge_ket(g, T, side):
    # g (l, r, d, u, fk, fb); T (p, -x, +x, -y, +y, -z, +z)
    # result (l, r, d, u, fb, p, f_out)
    f_in, f_out = (6, 5) if side == "upper" else (5, 6)
    labels_T = [20, 11, 12, 13, 14, 15, 16]
    labels_T[f_in] = 4
    out = einsum([0, 11, 1, 12, 2, 13, 3, 14, 5, 20, 10 + f_out], g, [0, 1, 2, 3, 4, 5], T, labels_T)
    s = out.shape
    return out.reshape(s[0] * s[1], s[2] * s[3], s[4] * s[5], s[6] * s[7], s[8], s[9], s[10])


def _merge_bra(g, Tc, side):
    # g (l, r, d, u, fb, p, fk_new); Tc conj tensor -> (l, r, d, u, fk_new, fb_new)
    f_in, f_out = (6, 5) if side == "upper" else (5, 6)
    labels_T = [5, 11, 12, 13, 14, 15, 16]
    labels_T[f_in] = 4
    out = einsum([0, 11, 1, 12, 2, 13, 3, 14, 6, 10 + f_out], g, [0, 1, 2, 3, 4, 5, 6], Tc, labels_T)
    s = out.shape
    return out.reshape(s[0] * s[1], s[2] * s[3], s[4] * s[5], s[6] * s[7], s[8], s[9])


def _apply_projectors(g, projs):
    for ax, P in projs.items():
        g = np.moveaxis(np.tensordot(g, P, axes=(ax, 0)), -1, ax)
    return g


def absorb_layer(bnd: BoundaryPeps2D, state: Peps3D, z: int, d: int) -> BoundaryPeps2D:
    """Return the boundary with layer ``z`` absorbed (ket half, cut, bra half, cut)."""
    lat = state.lattice
    nx, ny, _ = lat.shape
    ket = {(x, y): state.tensors[lat.index((x, y, z))] for x in range(nx) for y in range(ny)}
    dims_x = {k: ket[k].shape[2] for k in bnd.lam_x}
    dims_y = {k: ket[k].shape[4] for k in bnd.lam_y}
    gam = {xy: _merge_ket(bnd.gammas[xy], ket[xy], bnd.side) for xy in ket}
    lam_x = {k: np.kron(v, np.ones(dims_x[k])) for k, v in bnd.lam_x.items()}
    lam_y = {k: np.kron(v, np.ones(dims_y[k])) for k, v in bnd.lam_y.items()}
    errors = []
    st1, ls1 = simple_update(gam, lam_x, lam_y, bnd.shape, d, errors)
    gam = {xy: _merge_bra(gam[xy], ket[xy].conj(), bnd.side) for xy in ket}
    lam_x = {k: np.kron(v, np.ones(dims_x[k])) for k, v in lam_x.items()}
    lam_y = {k: np.kron(v, np.ones(dims_y[k])) for k, v in lam_y.items()}
    st2, ls2 = simple_update(gam, lam_x, lam_y, bnd.shape, d, errors)
    out = BoundaryPeps2D(bnd.shape, bnd.side, z, gam, lam_x, lam_y,
                         bnd.log_scale + ls1 + ls2, bnd.trunc_errors + [max(errors, default=0.0)],
                         {"gamma": bnd.gammas, "ket": ket}, (st1, st2))
    return out


def build_boundaries(state: Peps3D, settings: EvalSettings | None = None, full: bool = True):
    """Upper and lower boundaries for every layer.

    ``upper[z]`` holds layers ``z .. Lz-1`` (``upper[Lz]`` is empty) and
    ``lower[z]`` holds layers ``0 .. z-1`` (``lower[0]`` is empty), so
    ``upper[m]`` and ``lower[m]`` meet between layers ``m-1`` and ``m``.
    With ``full=False`` the two boundaries covering the whole lattice
    (``upper[0]`` and ``lower[Lz]``, unused by the correlators) are skipped
    unless ``Lz == 1``.  A :class:`BoundaryTruncationWarning` is issued for
    every absorption whose truncation error exceeds ``settings.trunc_tol``.
    """
    settings = settings or EvalSettings()
    nx, ny, nz = state.lattice.shape
    upper = [None] * (nz + 1)
    lower = [None] * (nz + 1)
    upper[nz] = BoundaryPeps2D.empty((nx, ny), "upper")
    lower[0] = BoundaryPeps2D.empty((nx, ny), "lower")
    stop = 0 if full or nz == 1 else 1
    for z in range(nz - 1, stop - 1, -1):
        upper[z] = absorb_layer(upper[z + 1], state, z, settings.d)
        _check_error(upper[z], settings)
    for z in range(nz if full else nz - 1):
        lower[z + 1] = absorb_layer(lower[z], state, z, settings.d)
        _check_error(lower[z + 1], settings)
    return upper, lower


def _check_error(bnd, settings):
    err = bnd.trunc_errors[-1]
    if err > settings.trunc_tol:
        msg = f"{bnd.side} boundary at layer {bnd.layer}: truncation error {err:.3g} > {settings.trunc_tol}"
        log.warning(msg)
        warnings.warn(msg, BoundaryTruncationWarning, stacklevel=3)


# ---------------------------------------------------------------------------
# planar contraction of one meeting level
# ---------------------------------------------------------------------------


class _Meeting:
    """Planar network ``up . low`` with cached row boundaries."""

    def __init__(self, up: BoundaryPeps2D, low: BoundaryPeps2D, chi: int):
        self.up, self.low = up, low
        nx, ny = up.shape
        self.nx, self.ny = nx, ny
        self.rows = [[self.stack((x, y)) for x in range(nx)] for y in range(ny)]
        self.bots = [trivial_mps(nx, 2)]
        for y in range(ny):
            self.bots.append(zipper_advance(self.bots[-1], self.rows[y], chi, from_top=False))
        self.tops = [None] * ny + [trivial_mps(nx, 2)]
        for y in range(ny - 1, -1, -1):
            self.tops[y] = zipper_advance(self.tops[y + 1], self.rows[y], chi, from_top=True)
        self.mps_error = max(b.trunc_error for b in self.bots[1:] + self.tops[:-1])
        self._strips = {}

    def stack(self, xy, up=None, low=None):
        u = self.up.exported(xy) if up is None else up
        lo = self.low.exported(xy) if low is None else low
        return [(u, [0, 1]), (lo, [0, 1])]

    def strip(self, y, h=1) -> StripEnv:
        key = (y, h)
        if key not in self._strips:
            rows = [list(self.rows[y + j]) for j in range(h)]
            self._strips[key] = StripEnv(rows, self.bots[y], self.tops[y + h])
        return self._strips[key]

    def log_norm(self) -> complex:
        env = self.strip(0)
        v, lg = env.value(0, [None] * self.nx)
        return complex(np.log(complex(v))) + lg + self.up.log_scale + self.low.log_scale

    def ratio(self, y, x, columns, h=1) -> complex:
        env = self.strip(y, h)
        num, _ = env.value(x, columns)
        den, _ = env.value(x, [None] * len(columns))
        return complex(num) / complex(den)


@dataclass
class DetResult:
    """Correlators in lattice bond order plus diagnostics."""

    correlators: np.ndarray
    imag_max: float
    boundary_error: float
    mps_error: float
    log_norms: list
    warnings: list
    settings: EvalSettings

    def metadata(self) -> dict:
        return {
            "d": self.settings.d,
            "chi_final": self.settings.chi_final,
            "trunc_tol": self.settings.trunc_tol,
            "max_truncation_error": self.boundary_error,
            "max_mps_truncation_error": self.mps_error,
            "max_imag": self.imag_max,
            "warnings": self.warnings,
        }


def bond_correlators_det(state: Peps3D, settings: EvalSettings | None = None, imag_tol: float | None = None,
                         boundaries=None) -> DetResult:
    """All ``<Z_a Z_b>`` by boundary contraction.

    Correlators must be real within ``imag_tol``.  The default is ``1e-8``
    plus ten times the square root of the largest recorded truncation
    error, since truncated ket and bra halves are not exact mirror images.
    Errors from many cuts compound, and a bound linear in the per-cut
    error proved too tight on small evolved states.
    """
    settings = settings or EvalSettings()
    lat = state.lattice
    nx, ny, nz = lat.shape
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", BoundaryTruncationWarning)
        upper, lower = boundaries if boundaries is not None else build_boundaries(state, settings, full=False)
    msgs = [str(w.message) for w in caught if issubclass(w.category, BoundaryTruncationWarning)]
    for m in msgs:
        warnings.warn(m, BoundaryTruncationWarning, stacklevel=2)

    meetings = {}

    def meeting(m):
        if m not in meetings:
            meetings[m] = _Meeting(upper[m], lower[m], settings.chi_final)
        return meetings[m]

    vals = np.zeros(lat.n_bonds, dtype=complex)
    for k, bd in enumerate(lat.bonds):
        ca, cb = lat.coord(bd.a), lat.coord(bd.b)
        if bd.direction == 2:
            m = cb[2]
            M = meeting(m)
            xy = ca[:2]
            col = M.stack(xy, up=upper[m].impurity(xy, SZ), low=lower[m].impurity(xy, SZ))
            vals[k] = M.ratio(xy[1], xy[0], [[col]])
            continue
        z = ca[2]
        if z >= 1 or nz == 1:
            m, side = z, "up"
        else:
            m, side = 1, "low"
        M = meeting(m)
        bnd = upper[m] if side == "up" else lower[m]

        def col(xy):
            imp = bnd.impurity(xy, SZ)
            return M.stack(xy, up=imp) if side == "up" else M.stack(xy, low=imp)

        if bd.direction == 0:
            vals[k] = M.ratio(ca[1], ca[0], [[col(ca[:2])], [col(cb[:2])]])
        else:
            vals[k] = M.ratio(ca[1], ca[0], [[col(ca[:2]), col(cb[:2])]], h=2)

    b_err = max((b.max_trunc_error for b in upper + lower if b is not None), default=0.0)
    mps_err = max((M.mps_error for M in meetings.values()), default=0.0)
    tol = imag_tol if imag_tol is not None else 1e-8 + 10.0 * np.sqrt(b_err + mps_err)
    imag_max = float(np.max(np.abs(vals.imag))) if vals.size else 0.0
    if imag_max > tol:
        raise NumericalConsistencyError(f"correlator imaginary part {imag_max:.3g} exceeds {tol:.3g}")
    corr = np.clip(vals.real, -1.0, 1.0)
    log_norms = [complex(M.log_norm()) for _, M in sorted(meetings.items())]
    return DetResult(corr, imag_max, b_err, mps_err, log_norms, msgs, settings)


def log_norm_at(state: Peps3D, m: int, settings: EvalSettings | None = None, boundaries=None) -> float:
    """``log <psi|psi>`` from meeting level ``m`` (``upper[m] . lower[m]``), including ``state.log_scale``."""
    settings = settings or EvalSettings()
    upper, lower = boundaries if boundaries is not None else build_boundaries(state, settings)
    val = _Meeting(upper[m], lower[m], settings.chi_final).log_norm()
    return float(val.real) + 2.0 * state.log_scale


def residual_energy(instance: DisorderInstance, corr, ground: GroundReference) -> float:
    """``N_b^-1 sum_b J_b (<ZZ>_b - <ZZ>_b,GS)``."""
    corr = np.asarray(corr, dtype=float)
    return float(np.dot(instance.couplings, corr - ground.correlators) / instance.n_bonds)


def residual_energy_det(state: Peps3D, instance: DisorderInstance, ground: GroundReference,
                        settings: EvalSettings | None = None):
    """Residual energy per bond from deterministic correlators.  Returns ``(Q, DetResult)``."""
    res = bond_correlators_det(state, settings)
    return residual_energy(instance, res.correlators, ground), res


def save_correlators(path, instance_or_lattice, result: DetResult, extra: dict | None = None):
    """Write ``bond_i,bond_j,direction,corr`` CSV and a sibling ``.json`` with metadata."""
    lat = getattr(instance_or_lattice, "lattice", instance_or_lattice)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["bond_i", "bond_j", "direction", "corr"])
        for bd, c in zip(lat.bonds, result.correlators):
            w.writerow([bd.a, bd.b, "xyz"[bd.direction], repr(float(c))])
    meta = result.metadata()
    meta["settings"] = asdict(result.settings)
    meta.update(extra or {})
    with open(str(path).rsplit(".", 1)[0] + ".json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2)
