"""Metropolis-Hastings sampling of sigma^z configurations from a PEPS.

Fixing every physical index turns the PEPS into a scalar network whose value
is the amplitude of that configuration.  A sweep runs in one of six
orientations (three choices of layer axis, two of the in-row axis).  In the
orientation frame the layers are stacked along z, rows run along y and the
updated pairs are nearest neighbours along x.

For layer ``z`` the projected layers above and below are compressed into
single-layer boundary PEPS of dimension ``d_mc`` (simple update).  The
planar network of (upper boundary, layer, lower boundary) triples is
contracted with row boundary MPS of dimension ``chi_mc``, and the strip
containing the active row yields the four amplitudes ``A_kl`` of the pair
with all other spins frozen.  Environments of the strip are shifted one
column after each pair, so pairs overlap by one site.

The proposal ``q_kl`` is the local weight of the pair alone with every
other leg closed by the Gram matrix of the neighbouring projected tensor
(see ``docs/sampler_proposal.md``).  It does not depend on the current
values of the pair, so the MH ratio
``|A_k'l'|^2 q_kl / (|A_kl|^2 q_k'l')`` gives detailed balance with
respect to ``|A|^2`` whatever the quality of ``q``.
"""

from __future__ import annotations

import json
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .model import DisorderInstance, GroundReference, make_rng
from .peps import Peps3D
from .planar import StripEnv, einsum, trivial_mps, zipper_advance
from .simple_update import simple_update
from .tensor import DTYPE

__all__ = [
    "ORIENTATIONS",
    "SamplerSettings",
    "McStats",
    "Frame",
    "project_layer",
    "planar_amplitude",
    "pair_amplitudes",
    "propose_pair",
    "mh_accept_prob",
    "mh_update_pair",
    "pair_transition_matrix",
    "Sampler",
    "run_sampling",
    "integrated_autocorr_time",
]

log = logging.getLogger(__name__)

# (in-row axis, row axis, layer axis) of the original lattice
ORIENTATIONS = ((0, 1, 2), (1, 0, 2), (1, 2, 0), (2, 1, 0), (2, 0, 1), (0, 2, 1))
AMP_FLOOR = 1e-300
PROPOSAL_FLOOR = 1e-12
SPIN = np.array([1.0, -1.0])


@dataclass
class SamplerSettings:
    """Boundary dimensions and run control.

    ``d_mc``/``chi_mc`` default to ``min(D**2, 16)`` and ``2 d_mc`` for the
    largest bond dimension ``D`` of the sampled state.  ``target_rel`` is
    the requested ``sigma_Q / Q``; ``max_cycles`` caps the number of
    6-sweep cycles, ``min_cycles`` forces a minimum after warm-up.
    """

    d_mc: int | None = None
    chi_mc: int | None = None
    target_rel: float = 0.01
    max_cycles: int = 400
    min_cycles: int = 16
    warmup: int | None = None
    estimator: str = "rb"
    block_cycles: int = 1
    cache_size: int = 4096

    def resolve(self, state: Peps3D) -> "SamplerSettings":
        D = state.max_bond_dim
        d = self.d_mc if self.d_mc is not None else min(D * D, 16)
        chi = self.chi_mc if self.chi_mc is not None else 2 * d
        warm = self.warmup if self.warmup is not None else max(4, int(math.ceil(0.1 * self.max_cycles)))
        if self.estimator not in ("rb", "raw"):
            raise ValueError("estimator must be 'rb' or 'raw'")
        return SamplerSettings(d, chi, self.target_rel, self.max_cycles, self.min_cycles, warm,
                               self.estimator, self.block_cycles, self.cache_size)


# ---------------------------------------------------------------------------
# orientation frames and projected boundaries
# ---------------------------------------------------------------------------


class Frame:
    """The state seen in one orientation.

    ``to_old[i]`` is the original index of frame site ``i``; frame sites are
    in C order of ``(x, y, z)`` with ``shape = (nx, ny, nz)``.
    """

    def __init__(self, state: Peps3D, orientation):
        self.orientation = tuple(orientation)
        self.state = state.permuted(self.orientation)
        lat = self.state.lattice
        self.shape = lat.shape
        old = state.lattice
        self.to_old = np.empty(lat.n_sites, dtype=np.int64)
        for i in range(lat.n_sites):
            c = lat.coord(i)
            oc = [0, 0, 0]
            for k in range(3):
                oc[self.orientation[k]] = c[k]
            self.to_old[i] = old.index(oc)
        nx, ny, nz = self.shape
        # projected tensors proj[s][x, y, z]: (l, r, d, u, -z, +z)
        self.tensors = [[[[None] * nz for _ in range(ny)] for _ in range(nx)] for _ in range(2)]
        self.open = [[[None] * nz for _ in range(ny)] for _ in range(nx)]
        for i, T in enumerate(self.state.tensors):
            x, y, z = lat.coord(i)
            for s in (0, 1):
                self.tensors[s][x][y][z] = np.ascontiguousarray(T[s])
            self.open[x][y][z] = np.ascontiguousarray(np.moveaxis(T, 0, -1))
        self.lattice = lat

    def grid(self, config) -> np.ndarray:
        """Configuration (original order) as an ``(nx, ny, nz)`` array in this frame."""
        return np.asarray(config)[self.to_old].reshape(self.shape)


@dataclass
class ProjectedBoundary:
    """Single-layer boundary: ``gammas[(x, y)]`` with axes ``(l, r, d, u, f)``."""

    gammas: dict
    lam_x: dict
    lam_y: dict
    log_scale: float
    trunc_error: float

    def exported(self, xy, shape):
        x, y = xy
        nx, ny = shape
        g = self.gammas[xy]
        w = [
            self.lam_x[(x - 1, y)] if x > 0 else None,
            self.lam_x[(x, y)] if x < nx - 1 else None,
            self.lam_y[(x, y - 1)] if y > 0 else None,
            self.lam_y[(x, y)] if y < ny - 1 else None,
        ]
        for ax, v in enumerate(w):
            if v is not None:
                shp = [1] * g.ndim
                shp[ax] = v.size
                g = g * np.sqrt(v).reshape(shp)
        return g


def _empty_boundary(nx, ny):
    one = np.ones((1,) * 5, dtype=DTYPE)
    return ProjectedBoundary(
        {(x, y): one for x in range(nx) for y in range(ny)},
        {(x, y): np.ones(1) for x in range(nx - 1) for y in range(ny)},
        {(x, y): np.ones(1) for x in range(nx) for y in range(ny - 1)},
        0.0,
        0.0,
    )


def _absorb_projected(bnd: ProjectedBoundary, frame: Frame, grid, z, side, d):
    nx, ny, _ = frame.shape
    gam = {}
    # upper: boundary f meets the layer's +z leg and the result exposes -z
    f_in, f_out = (5, 4) if side == "upper" else (4, 5)
    for x in range(nx):
        for y in range(ny):
            T = frame.tensors[grid[x, y, z]][x][y][z]
            lab = [11, 12, 13, 14, 15, 16]
            lab[f_in] = 4
            out = einsum([0, 11, 1, 12, 2, 13, 3, 14, 11 + f_out], bnd.gammas[(x, y)], [0, 1, 2, 3, 4], T, lab)
            s = out.shape
            gam[(x, y)] = out.reshape(s[0] * s[1], s[2] * s[3], s[4] * s[5], s[6] * s[7], s[8])
    lam_x = {k: np.kron(v, np.ones(frame.tensors[0][k[0]][k[1]][z].shape[1])) for k, v in bnd.lam_x.items()}
    lam_y = {k: np.kron(v, np.ones(frame.tensors[0][k[0]][k[1]][z].shape[3])) for k, v in bnd.lam_y.items()}
    errors = []
    _, ls = simple_update(gam, lam_x, lam_y, (nx, ny), d, errors)
    return ProjectedBoundary(gam, lam_x, lam_y, bnd.log_scale + ls, max([bnd.trunc_error] + errors))


class _Lru:
    def __init__(self, size):
        self.size = size
        self.data = OrderedDict()
        self.hits = 0
        self.misses = 0

    def get(self, key, make):
        if self.size <= 0:
            return make()
        if key in self.data:
            self.data.move_to_end(key)
            self.hits += 1
            return self.data[key]
        self.misses += 1
        val = make()
        self.data[key] = val
        if len(self.data) > self.size:
            self.data.popitem(last=False)
        return val


def _stack(frame, bnd_lo, bnd_up, grid, x, y, z, open_=False):
    nx, ny, _ = frame.shape
    lo = bnd_lo.exported((x, y), (nx, ny))
    up = bnd_up.exported((x, y), (nx, ny))
    if open_:
        return [(lo, [0]), (frame.open[x][y][z], [0, 1, 2]), (up, [1])]
    return [(lo, [0]), (frame.tensors[grid[x, y, z]][x][y][z], [0, 1]), (up, [1])]


def project_layer(state: Peps3D, config, orientation=(0, 1, 2), z=0, d_mc=None, open_sites=()):
    """Planar network of layer ``z`` in the given orientation.

    Returns ``(rows, log_scale)`` where ``rows[y][x]`` are stacks
    ``[lower boundary, layer tensor, upper boundary]`` and ``log_scale``
    collects the scales pulled out of both boundaries.  Sites listed in
    ``open_sites`` (frame coordinates ``(x, y)``) keep their physical index
    as an open leg.
    """
    frame = state if isinstance(state, Frame) else Frame(state, orientation)
    d = d_mc if d_mc is not None else min(frame.state.max_bond_dim ** 2, 16)
    grid = frame.grid(config)
    nx, ny, nz = frame.shape
    lo = _empty_boundary(nx, ny)
    for zz in range(z):
        lo = _absorb_projected(lo, frame, grid, zz, "lower", d)
    up = _empty_boundary(nx, ny)
    for zz in range(nz - 1, z, -1):
        up = _absorb_projected(up, frame, grid, zz, "upper", d)
    rows = [[_stack(frame, lo, up, grid, x, y, z, (x, y) in open_sites) for x in range(nx)] for y in range(ny)]
    return rows, lo.log_scale + up.log_scale + frame.state.log_scale


def planar_amplitude(rows, chi=None):
    """Contract a planar network exactly (``chi=None``) or with row MPS of dimension ``chi``.

    Returns ``(value, log_scale)``.  Open legs are allowed in the top row
    only and stay open in ``value``.
    """
    n, ny = len(rows[0]), len(rows)
    K = len(rows[0][0])
    bot = trivial_mps(n, K)
    for y in range(ny - 1):
        bot = zipper_advance(bot, rows[y], chi, from_top=False)
    env = StripEnv([rows[ny - 1]], bot, trivial_mps(n, K))
    return env.value(0, [None] * n)


# ---------------------------------------------------------------------------
# pair update primitives
# ---------------------------------------------------------------------------


def pair_amplitudes(env: StripEnv, x: int, open_a, open_b) -> np.ndarray:
    """``A[k, l]`` for the pair at columns ``x, x+1`` of a one-row strip (common scale dropped)."""
    val, _ = env.value(x, [[open_a], [open_b]])
    return np.asarray(val).reshape(2, 2)


def _leg_env(T, ax):
    """Gram matrix of a projected tensor on leg ``ax`` (trace normalised)."""
    m = np.moveaxis(T, ax, 0).reshape(T.shape[ax], -1)
    g = m @ m.conj().T
    tr = np.trace(g).real
    return g / tr if tr > 0 else np.eye(g.shape[0]) / g.shape[0]


def _site_weight(T, envs, shared):
    """``R[i, i'] = sum conj(T)_{i', o'} E_{o' o} T_{i, o}`` with the shared leg kept."""
    out = T
    for ax, E in envs.items():
        out = np.moveaxis(np.tensordot(out, E, axes=(ax, 1)), -1, ax)
    axes = [a for a in range(T.ndim) if a != shared]
    return np.tensordot(out, T.conj(), axes=(axes, axes))


def local_weights(frame: Frame, grid, x, y, z) -> np.ndarray:
    """``P[k, l]`` of the pair ``(x, y, z)``-``(x+1, y, z)``; depends on neighbours only."""
    nx, ny, nz = frame.shape
    out = np.empty((2, 2))
    R = []
    for site, shared in (((x, y, z), 1), ((x + 1, y, z), 0)):
        envs = {}
        for ax, (dx, dy, dz) in enumerate(((-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1))):
            if ax == shared:
                continue
            n = (site[0] + dx, site[1] + dy, site[2] + dz)
            if not (0 <= n[0] < nx and 0 <= n[1] < ny and 0 <= n[2] < nz):
                continue
            Tn = frame.tensors[grid[n]][n[0]][n[1]][n[2]]
            envs[ax] = _leg_env(Tn, ax + 1 if ax % 2 == 0 else ax - 1)
        R.append([_site_weight(frame.tensors[s][site[0]][site[1]][site[2]], envs, shared) for s in (0, 1)])
    for k in (0, 1):
        for l in (0, 1):
            out[k, l] = max(float(np.sum(R[0][k] * R[1][l]).real), 0.0)
    return out


def propose_pair(P, rng) -> tuple:
    """Draw ``(k, l)`` from ``q ∝ P`` (floored at ``1e-12 max``).

    Returns ``(k, l, q, fallback)`` where ``fallback`` flags the uniform
    proposal used when every weight vanishes.
    """
    P = np.asarray(P, dtype=float).reshape(4)
    top = P.max()
    if not np.isfinite(top) or top <= 0:
        q = np.full(4, 0.25)
        fallback = True
    else:
        q = np.maximum(P, PROPOSAL_FLOOR * top)
        q = q / q.sum()
        fallback = False
    j = int(rng.choice(4, p=q))
    return j // 2, j % 2, q.reshape(2, 2), fallback


def mh_accept_prob(cur, new, A, q) -> float:
    """Acceptance probability of ``cur -> new`` for target ``|A|^2`` and proposal ``q``."""
    if cur == new:
        return 1.0
    pa = abs(A[new]) ** 2 if abs(A[new]) > AMP_FLOOR else 0.0
    pc = abs(A[cur]) ** 2 if abs(A[cur]) > AMP_FLOOR else 0.0
    if pc == 0.0:
        return 1.0 if pa > 0.0 else 0.0
    return min(1.0, pa * q[cur] / (pc * q[new]))


def mh_update_pair(cur, A, q, new, rng):
    """Return ``(accepted pair, accepted flag)``."""
    p = mh_accept_prob(cur, new, A, q)
    if p >= 1.0 or rng.random() < p:
        return new, True
    return cur, False


def pair_transition_matrix(A, q) -> np.ndarray:
    """4x4 Markov matrix of one pair update (row = current ``2k+l``)."""
    A = np.asarray(A).reshape(2, 2)
    q = np.asarray(q, dtype=float).reshape(2, 2)
    T = np.zeros((4, 4))
    for c in range(4):
        cur = divmod(c, 2)
        for n in range(4):
            if n == c:
                continue
            new = divmod(n, 2)
            T[c, n] = q[new] * mh_accept_prob(cur, new, A, q)
        T[c, c] = 1.0 - T[c].sum()
    return T


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------


def integrated_autocorr_time(series, c: float = 5.0) -> float:
    """Integrated autocorrelation time with Sokal's self-consistent window."""
    x = np.asarray(series, dtype=float)
    n = x.size
    if n < 4:
        return float("nan")
    x = x - x.mean()
    var = x @ x / n
    if var <= 0:
        return 0.5
    f = np.fft.rfft(x, 2 * n)
    acf = np.fft.irfft(f * np.conj(f))[:n] / (n * var)
    tau = 0.5
    for m in range(1, n):
        tau += acf[m]
        if m >= c * tau:
            break
    return float(max(tau, 0.5))


@dataclass
class McStats:
    """Block statistics of a sampling run.

    ``block_q`` holds one Q value per block of ``block_sweeps`` sweeps
    (six per cycle by default).  ``sweep_q`` is the per-sweep residual
    energy of the current configuration, used for ``tau_int``.
    """

    block_sweeps: int = 6
    block_q: list = field(default_factory=list)
    block_corr: list = field(default_factory=list)
    sweep_q: list = field(default_factory=list)
    sweep_acceptance: list = field(default_factory=list)
    n_sweeps: int = 0
    n_proposals: int = 0
    n_accepted: int = 0
    n_fallback: int = 0
    warmup_cycles: int = 0
    tau_int: float = float("nan")
    converged: bool = False
    estimator: str = "rb"
    seeds: list = field(default_factory=list)
    cache_hits: int = 0
    cache_misses: int = 0
    max_trunc_error: float = 0.0

    @property
    def n_blocks(self) -> int:
        return len(self.block_q)

    @property
    def acceptance(self) -> float:
        return self.n_accepted / self.n_proposals if self.n_proposals else 1.0

    def estimate(self):
        """``(Q, sigma_Q)``; ``sigma_Q`` is NaN with fewer than 4 blocks."""
        q = np.asarray(self.block_q, dtype=float)
        if q.size == 0:
            return float("nan"), float("nan")
        if q.size < 4:
            return float(q.mean()), float("nan")
        return float(q.mean()), float(q.std(ddof=1) / np.sqrt(q.size))

    def merge_blocks(self):
        """Combine adjacent blocks pairwise (block length doubles; odd tail dropped)."""
        m = len(self.block_q) // 2
        self.block_q = [0.5 * (self.block_q[2 * i] + self.block_q[2 * i + 1]) for i in range(m)]
        self.block_corr = [0.5 * (self.block_corr[2 * i] + self.block_corr[2 * i + 1]) for i in range(m)]
        self.block_sweeps *= 2

    @staticmethod
    def combine(runs) -> "McStats":
        """Merge independent chains (blocks of equal length are pooled)."""
        runs = list(runs)
        L = max(r.block_sweeps for r in runs)
        out = McStats(block_sweeps=L, estimator=runs[0].estimator)
        for r in runs:
            r = McStats(**{**r.__dict__})
            while r.block_sweeps < L:
                r.merge_blocks()
            out.block_q += r.block_q
            out.block_corr += r.block_corr
            out.sweep_q += r.sweep_q
            out.sweep_acceptance += r.sweep_acceptance
            out.n_sweeps += r.n_sweeps
            out.n_proposals += r.n_proposals
            out.n_accepted += r.n_accepted
            out.n_fallback += r.n_fallback
            out.seeds += r.seeds
            out.cache_hits += r.cache_hits
            out.cache_misses += r.cache_misses
            out.max_trunc_error = max(out.max_trunc_error, r.max_trunc_error)
        out.warmup_cycles = max(r.warmup_cycles for r in runs)
        out.tau_int = max(r.tau_int for r in runs)
        out.converged = all(r.converged for r in runs)
        return out

    def to_dict(self) -> dict:
        q, s = self.estimate()
        return {
            "Q": q,
            "sigma_Q": s,
            "block_sweeps": self.block_sweeps,
            "n_blocks": self.n_blocks,
            "block_q": list(map(float, self.block_q)),
            "n_sweeps": self.n_sweeps,
            "acceptance": self.acceptance,
            "fallback_proposals": self.n_fallback,
            "warmup_cycles": self.warmup_cycles,
            "tau_int_sweeps": self.tau_int,
            "converged": self.converged,
            "estimator": self.estimator,
            "seeds": self.seeds,
            "cache_hits": self.cache_hits,
            "cache_misses": self.cache_misses,
            "max_boundary_truncation_error": self.max_trunc_error,
        }


# ---------------------------------------------------------------------------
# the chain
# ---------------------------------------------------------------------------


class Sampler:
    """One Markov chain over sigma^z configurations of ``state``."""

    def __init__(self, state: Peps3D, settings: SamplerSettings | None = None, seed: int = 0, config=None):
        self.settings = (settings or SamplerSettings()).resolve(state)
        self.state = state
        self.lattice = state.lattice
        self.rng = make_rng(seed)
        self.seed = seed
        self.frames = [Frame(state, o) for o in ORIENTATIONS]
        self.cache = _Lru(self.settings.cache_size)
        self.config = np.asarray(config, dtype=np.int8) if config is not None else self.initial_config()
        self.max_trunc_error = 0.0
        self._bond_of = {}
        for k, bd in enumerate(self.lattice.bonds):
            self._bond_of[(bd.a, bd.b)] = k
            self._bond_of[(bd.b, bd.a)] = k

    def initial_config(self) -> np.ndarray:
        """Site-by-site draw from single-site weights ``||T_i[s]||^2``."""
        cfg = np.empty(self.lattice.n_sites, dtype=np.int8)
        for i, T in enumerate(self.state.tensors):
            w = np.array([np.linalg.norm(T[0]), np.linalg.norm(T[1])]) ** 2
            w = w / w.sum() if w.sum() > 0 else np.full(2, 0.5)
            cfg[i] = self.rng.random() >= w[0]
        return cfg

    # boundaries with content-keyed caching
    def _upper(self, fi, grid, z):
        frame = self.frames[fi]
        nx, ny, nz = frame.shape
        if z >= nz:
            return _empty_boundary(nx, ny)
        key = ("U", fi, z, grid[:, :, z:].tobytes())
        return self.cache.get(key, lambda: _absorb_projected(self._upper(fi, grid, z + 1), frame, grid, z, "upper",
                                                             self.settings.d_mc))

    def _lower(self, fi, grid, z):
        frame = self.frames[fi]
        nx, ny, _ = frame.shape
        if z <= 0:
            return _empty_boundary(nx, ny)
        key = ("L", fi, z, grid[:, :, :z].tobytes())
        return self.cache.get(key, lambda: _absorb_projected(self._lower(fi, grid, z - 1), frame, grid, z - 1, "lower",
                                                             self.settings.d_mc))

    def sweep(self, fi: int, estimates: dict | None = None):
        """One sweep in orientation ``fi``; returns ``(proposals, accepted)``.

        Conditional (or raw) correlator estimates are appended to
        ``estimates[bond]``.
        """
        frame = self.frames[fi]
        nx, ny, nz = frame.shape
        chi = self.settings.chi_mc
        grid = frame.grid(self.config).copy()
        to_old = frame.to_old.reshape(frame.shape)
        n_prop = n_acc = 0
        for z in range(nz):
            lo = self._lower(fi, grid, z)
            up = self._upper(fi, grid, z + 1)
            self.max_trunc_error = max(self.max_trunc_error, lo.trunc_error, up.trunc_error)
            rows = [[_stack(frame, lo, up, grid, x, y, z) for x in range(nx)] for y in range(ny)]
            tops = [None] * ny + [trivial_mps(nx, 3)]
            for y in range(ny - 1, 0, -1):
                key = ("T", fi, z, y, chi, grid[:, :, :z].tobytes(), grid[:, y:, z].tobytes(), grid[:, :, z + 1:].tobytes())
                tops[y] = self.cache.get(key, lambda y=y: zipper_advance(tops[y + 1], rows[y], chi, from_top=True))
            bot = trivial_mps(nx, 3)
            for y in range(ny):
                if nx > 1:
                    env = StripEnv([rows[y]], bot, tops[y + 1])
                    for x in range(nx - 1):
                        A = pair_amplitudes(env, x, _stack(frame, lo, up, grid, x, y, z, True),
                                            _stack(frame, lo, up, grid, x + 1, y, z, True))
                        P = local_weights(frame, grid, x, y, z)
                        k, l, q, fb = propose_pair(P, self.rng)
                        self._n_fallback += fb
                        cur = (int(grid[x, y, z]), int(grid[x + 1, y, z]))
                        new, acc = mh_update_pair(cur, A, q, (k, l), self.rng)
                        n_prop += 1
                        n_acc += acc
                        if estimates is not None:
                            b = self._bond_of[(int(to_old[x, y, z]), int(to_old[x + 1, y, z]))]
                            if self.settings.estimator == "rb":
                                w = np.abs(A) ** 2
                                tot = w.sum()
                                val = float(SPIN @ w @ SPIN / tot) if tot > 0 else SPIN[new[0]] * SPIN[new[1]]
                            else:
                                val = SPIN[new[0]] * SPIN[new[1]]
                            estimates.setdefault(b, []).append(val)
                        if new != cur:
                            grid[x, y, z], grid[x + 1, y, z] = new
                            rows[y][x] = _stack(frame, lo, up, grid, x, y, z)
                            rows[y][x + 1] = _stack(frame, lo, up, grid, x + 1, y, z)
                            env.replace_column(x, [rows[y][x]])
                            env.replace_column(x + 1, [rows[y][x + 1]])
                if y < ny - 1:
                    key = ("B", fi, z, y, chi, grid[:, :, :z].tobytes(), grid[:, : y + 1, z].tobytes(),
                           grid[:, :, z + 1:].tobytes())
                    bot = self.cache.get(key, lambda b=bot, y=y: zipper_advance(b, rows[y], chi, from_top=False))
        cfg = np.empty_like(self.config)
        cfg[frame.to_old] = grid.reshape(-1)
        self.config = cfg
        return n_prop, n_acc

    _n_fallback = 0


def _config_q(instance, ground, cfg, a, b):
    s = 1.0 - 2.0 * cfg
    return float(np.dot(instance.couplings, s[a] * s[b] - ground.correlators) / instance.n_bonds)


def run_sampling(state: Peps3D, instance: DisorderInstance, ground: GroundReference,
                 settings: SamplerSettings | None = None, seed: int = 0, log_path=None, stats_path=None):
    """Sample until ``sigma_Q / Q <= target_rel`` or ``max_cycles`` cycles.

    A cycle is one sweep per orientation; blocks are ``block_cycles``
    cycles (6 sweeps).  The first ``warmup`` cycles are discarded.  The
    block length doubles while the per-sweep autocorrelation time is three
    block lengths or more.  Returns ``(Q, sigma_Q, McStats)``.
    """
    chain = Sampler(state, settings, seed)
    st = chain.settings
    a = np.fromiter((bd.a for bd in instance.lattice.bonds), int, instance.n_bonds)
    b = np.fromiter((bd.b for bd in instance.lattice.bonds), int, instance.n_bonds)
    stats = McStats(block_sweeps=6 * st.block_cycles, estimator=st.estimator, seeds=[seed],
                    warmup_cycles=st.warmup)
    sample_log = []
    n_orient = len(ORIENTATIONS)
    cycle = 0
    est = {}
    in_block = 0
    while cycle < st.warmup + st.max_cycles:
        measuring = cycle >= st.warmup
        for fi in range(n_orient):
            n_prop, n_acc = chain.sweep(fi, est if measuring else None)
            stats.n_sweeps += 1
            rate = n_acc / n_prop if n_prop else 1.0
            qc = _config_q(instance, ground, chain.config, a, b)
            sample_log.append((stats.n_sweeps, qc, rate))
            if measuring:
                stats.n_proposals += n_prop
                stats.n_accepted += n_acc
                stats.sweep_acceptance.append(rate)
                stats.sweep_q.append(qc)
        cycle += 1
        if not measuring:
            continue
        in_block += 1
        if in_block == st.block_cycles:
            corr = np.array([np.mean(est[k]) if k in est else np.nan for k in range(instance.n_bonds)])
            if np.any(np.isnan(corr)):
                # bonds never visited in this block (lattice extent 1 along an axis)
                corr = np.where(np.isnan(corr), _config_corr(chain.config, a, b), corr)
            stats.block_corr.append(corr)
            stats.block_q.append(float(np.dot(instance.couplings, corr - ground.correlators) / instance.n_bonds))
            est = {}
            in_block = 0
            if _done(stats, st):
                stats.converged = True
                break
    stats.tau_int = integrated_autocorr_time(stats.sweep_q)
    stats.n_fallback = chain._n_fallback
    stats.cache_hits, stats.cache_misses = chain.cache.hits, chain.cache.misses
    stats.max_trunc_error = chain.max_trunc_error
    _adjust_blocks(stats)
    q, s = stats.estimate()
    if log_path is not None:
        np.array(sample_log, dtype=[("sweep", "<i8"), ("Q", "<f8"), ("acceptance", "<f8")]).tofile(log_path)
    if stats_path is not None:
        with open(stats_path, "w", encoding="utf-8") as fh:
            json.dump(stats.to_dict(), fh, indent=2)
    return q, s, stats


def _config_corr(cfg, a, b):
    s = 1.0 - 2.0 * cfg
    return s[a] * s[b]


def _adjust_blocks(stats: McStats):
    while (stats.n_blocks >= 8 and np.isfinite(stats.tau_int)
           and stats.tau_int >= 3 * stats.block_sweeps):
        stats.merge_blocks()


def _done(stats: McStats, st: SamplerSettings) -> bool:
    if stats.n_blocks < max(4, st.min_cycles // st.block_cycles):
        return False
    stats.tau_int = integrated_autocorr_time(stats.sweep_q)
    # merge on a view so that later blocks keep the base length
    view = McStats(block_sweeps=stats.block_sweeps, block_q=stats.block_q, block_corr=stats.block_corr,
                   tau_int=stats.tau_int)
    _adjust_blocks(view)
    q, s = view.estimate()
    if not np.isfinite(s):
        return False
    if s == 0.0:
        return True
    return abs(q) > 0 and s / abs(q) <= st.target_rel
