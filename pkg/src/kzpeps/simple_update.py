"""Simple-update truncation of weighted 2D tensor networks.

Boundary networks in both evaluators store a weight vector on every bond.
Truncating a bond uses those weights as the only environment, and the
resulting projector pairs are kept so that a site tensor can later be
rebuilt with an operator inserted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import svd_truncate

__all__ = ["Stage", "outer_legs", "simple_update"]

SV_CUTOFF = 1e-14


@dataclass
class Stage:
    """Projectors ``proj[(x, y)][axis]`` and site scales of one half-layer."""

    proj: dict
    scale: dict


def outer_legs(vectors, ndim):
    """Broadcastable product of per-axis vectors on the first four axes."""
    out = 1.0
    for ax, v in enumerate(vectors):
        shp = [1] * ndim
        shp[ax] = v.size
        out = out * v.reshape(shp)
    return out


def _bond_r(g, weights, axis):
    """R factor of the site tensor (other weights absorbed) with ``axis`` last."""
    w = [np.ones_like(v) if k == axis else v for k, v in enumerate(weights)]
    m = g * outer_legs(w, g.ndim)
    m = np.moveaxis(m, axis, -1).reshape(-1, g.shape[axis])
    return np.linalg.qr(m, mode="r")


def simple_update(gam, lam_x, lam_y, shape, d, errors):
    """Cut every in-plane bond of a weighted 2D network to ``d``, in place.

    ``gam[(x, y)]`` are site tensors with axes ``(l, r, d, u, *extra)`` and
    ``lam_x``/``lam_y`` the weight vectors of horizontal/vertical bonds.
    For a bond with weight ``w`` between sites ``a`` and ``b`` the R factors
    of both sites (all other weights absorbed) give
    ``theta = R_a diag(w) R_b^T ~ U S V^H``; the projectors
    ``P_a = diag(w) R_b^T V S^-1`` and ``P_b = S^-1 U^H R_a diag(w)`` are
    applied to the bond legs and ``S`` becomes the new weight.  Truncation
    errors are appended to ``errors``.  Returns ``(Stage, log_scale)``.
    """
    nx, ny = shape
    proj = {xy: {} for xy in gam}
    log_scale = 0.0

    def weights(xy):
        x, y = xy
        return [
            lam_x[(x - 1, y)] if x > 0 else np.ones(gam[xy].shape[0]),
            lam_x[(x, y)] if x < nx - 1 else np.ones(gam[xy].shape[1]),
            lam_y[(x, y - 1)] if y > 0 else np.ones(gam[xy].shape[2]),
            lam_y[(x, y)] if y < ny - 1 else np.ones(gam[xy].shape[3]),
        ]

    # two-colour order: x bonds by parity of x, then y bonds by parity of y
    bonds = []
    for par in (0, 1):
        bonds += [("x", (x, y)) for x in range(par, nx - 1, 2) for y in range(ny)]
    for par in (0, 1):
        bonds += [("y", (x, y)) for y in range(par, ny - 1, 2) for x in range(nx)]
    for kind, a in bonds:
        if kind == "x":
            b, ax_a, ax_b, lam = (a[0] + 1, a[1]), 1, 0, lam_x
        else:
            b, ax_a, ax_b, lam = (a[0], a[1] + 1), 3, 2, lam_y
        w = lam[a]
        ra = _bond_r(gam[a], weights(a), ax_a)
        rb = _bond_r(gam[b], weights(b), ax_b)
        theta = (ra * w[None, :]) @ rb.T
        res = svd_truncate(theta, [0], max_rank=d, cutoff=SV_CUTOFF)
        errors.append(res.truncation_error)
        s = res.singular_values
        u = res.left
        vh = res.right
        pa = (w[:, None] * rb.T) @ (vh.conj().T / s[None, :])
        pb = ((u.conj().T / s[:, None]) @ ra) * w[None, :]
        gam[a] = np.moveaxis(np.tensordot(gam[a], pa, axes=(ax_a, 0)), -1, ax_a)
        gam[b] = np.moveaxis(np.tensordot(gam[b], pb.T, axes=(ax_b, 0)), -1, ax_b)
        _compose(proj[a], ax_a, pa)
        _compose(proj[b], ax_b, pb.T)
        c = float(np.sum(s))
        lam[a] = s / c
        log_scale += np.log(c)
    scale = {}
    for xy in gam:
        nrm = float(np.linalg.norm(gam[xy]))
        gam[xy] = gam[xy] / nrm
        scale[xy] = nrm
        log_scale += np.log(nrm)
    return Stage(proj, scale), float(log_scale)


def _compose(table, axis, P):
    table[axis] = P if axis not in table else table[axis] @ P
