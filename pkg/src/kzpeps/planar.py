"""Contraction of finite planar networks with boundary MPS.

A planar network is a grid ``rows[y][x]`` of *stacks*.  A stack is a list of
``(array, extra)`` pairs; every array has axes ``(l, r, d, u, *extra)`` where
``extra`` are integer labels private to the stack.  Labels occurring twice in
a stack are summed; labels occurring once stay open (used for physical
indices of sites being sampled).  In-plane legs of layer ``k`` of a stack
only connect to layer ``k`` of the neighbouring stacks.

Boundary MPS tensors have axes ``(left, p_0, ..., p_{K-1}, right)`` with one
physical leg per stack layer.  Rows are absorbed with the zipper: the
transfer tensors are applied one site at a time and each step is closed with
a truncated SVD that moves the orthogonality centre one site to the right.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import opt_einsum as oe

from .tensor import DTYPE, svd_truncate

__all__ = [
    "BoundaryMps",
    "einsum",
    "trivial_mps",
    "zipper_advance",
    "mps_overlap",
    "StripEnv",
    "strip_value",
]

_EXPR_CACHE: dict = {}


def einsum(out, *operands):
    """Contract ``(array, labels)`` pairs with integer labels into ``out``.

    Contraction paths are cached per equation and shapes.
    """
    arrays = operands[0::2]
    labels = operands[1::2]
    symbols = {}

    def sym(i):
        if i not in symbols:
            symbols[i] = oe.get_symbol(len(symbols))
        return symbols[i]

    eq = ",".join("".join(sym(i) for i in lab) for lab in labels) + "->" + "".join(sym(i) for i in out)
    key = (eq, tuple(a.shape for a in arrays))
    expr = _EXPR_CACHE.get(key)
    if expr is None:
        expr = oe.contract_expression(eq, *key[1], optimize="auto")
        if len(_EXPR_CACHE) > 20000:
            _EXPR_CACHE.clear()
        _EXPR_CACHE[key] = expr
    return expr(*arrays)


@dataclass
class BoundaryMps:
    """Row boundary of a planar network.

    ``center`` is the orthogonality-centre position (``None`` if unknown),
    ``log_scale`` a factor pulled out of the tensors and ``trunc_error``
    the largest truncation error of the last absorption.
    """

    tensors: list
    center: int | None = None
    log_scale: float = 0.0
    trunc_error: float = 0.0
    exact: bool = True

    @property
    def length(self) -> int:
        return len(self.tensors)

    @property
    def bond_dims(self):
        return [t.shape[-1] for t in self.tensors[:-1]]

    def copy(self) -> "BoundaryMps":
        return BoundaryMps([t.copy() for t in self.tensors], self.center, self.log_scale, self.trunc_error, self.exact)

    def is_trivial(self) -> bool:
        return all(t.size == 1 for t in self.tensors)

    def dense(self) -> np.ndarray:
        """Full contraction (for small test cases), including ``exp(log_scale)``."""
        out = self.tensors[0]
        for t in self.tensors[1:]:
            out = np.tensordot(out, t, axes=(out.ndim - 1, 0))
        return out.squeeze(axis=(0, out.ndim - 1)) * np.exp(self.log_scale)

    def right_canonicalize(self):
        """QR sweep from the right; the centre ends on site 0."""
        ts = self.tensors
        for i in range(len(ts) - 1, 0, -1):
            t = ts[i]
            shp = t.shape
            m = t.reshape(shp[0], -1).T
            q, r = np.linalg.qr(m)
            ts[i] = q.T.reshape((q.shape[1],) + shp[1:])
            ts[i - 1] = np.tensordot(ts[i - 1], r.T, axes=(ts[i - 1].ndim - 1, 0))
        nrm = np.linalg.norm(ts[0])
        if nrm > 0:
            ts[0] = ts[0] / nrm
            self.log_scale += float(np.log(nrm))
        self.center = 0
        return self

    def left_canonicalize(self):
        ts = self.tensors
        for i in range(len(ts) - 1):
            t = ts[i]
            shp = t.shape
            m = t.reshape(-1, shp[-1])
            q, r = np.linalg.qr(m)
            ts[i] = q.reshape(shp[:-1] + (q.shape[1],))
            ts[i + 1] = np.tensordot(r, ts[i + 1], axes=(1, 0))
        nrm = np.linalg.norm(ts[-1])
        if nrm > 0:
            ts[-1] = ts[-1] / nrm
            self.log_scale += float(np.log(nrm))
        self.center = len(ts) - 1
        return self

    def isometry_defect(self) -> float:
        """Largest deviation from the canonical conditions around the centre."""
        c = self.center
        worst = 0.0
        for i, t in enumerate(self.tensors):
            if c is None or i == c:
                continue
            if i < c:
                m = t.reshape(-1, t.shape[-1])
                g = m.conj().T @ m
            else:
                m = t.reshape(t.shape[0], -1)
                g = m @ m.conj().T
            worst = max(worst, float(np.max(np.abs(g - np.eye(g.shape[0])))))
        return worst


def trivial_mps(n: int, n_layers: int) -> BoundaryMps:
    return BoundaryMps([np.ones((1,) * (n_layers + 2), dtype=DTYPE) for _ in range(n)], center=0)


def _connect_labels(from_top):
    # axis positions in (l, r, d, u): the leg facing the boundary and the leg left open
    return (3, 2) if from_top else (2, 3)


def zipper_advance(mps: BoundaryMps, row, chi: int | None, from_top: bool = True, cutoff: float = 1e-14,
                   keep_exact_first: bool = True) -> BoundaryMps:
    """Absorb one row of stacks into ``mps`` and return the new boundary.

    ``from_top`` means the boundary sits above the row (connects to the ``u``
    legs) and the result connects to the ``d`` legs.  A trivial input
    boundary is absorbed without truncation when ``keep_exact_first``.
    """
    n = len(row)
    K = len(row[0])
    conn, open_ = _connect_labels(from_top)
    work = mps.copy().right_canonicalize()
    exact_only = keep_exact_first and mps.is_trivial()
    max_rank = None if exact_only or chi is None else chi
    carry = np.ones((1,) * (K + 2), dtype=DTYPE)  # (n, a, b_0..b_{K-1})
    new = []
    err = 0.0
    log_scale = work.log_scale
    for x in range(n):
        lab_n, lab_a, lab_a2 = 0, 1, 2
        # carry (n, a, b..) . mps (a, p.., a2) . stacks (b, r, p|o, o|p, extras)
        b = [10 + k for k in range(K)]
        p = [20 + k for k in range(K)]
        r = [30 + k for k in range(K)]
        o = [40 + k for k in range(K)]
        ops = [carry, [lab_n, lab_a] + b, work.tensors[x], [lab_a] + p + [lab_a2]]
        for k, (arr, extra) in enumerate(row[x]):
            labs = [0] * 4
            labs[0], labs[1] = b[k], r[k]
            labs[conn], labs[open_] = p[k], o[k]
            ops += [arr, labs + [1000 + e for e in extra]]
        theta = einsum([lab_n] + o + [lab_a2] + r, *ops)
        shp = theta.shape
        if x == n - 1:
            t = theta.reshape(shp[: K + 1] + (-1,))
            nrm = np.linalg.norm(t)
            if nrm > 0:
                t = t / nrm
                log_scale += float(np.log(nrm))
            new.append(t)
            break
        res = svd_truncate(theta, list(range(K + 1)), max_rank=max_rank, cutoff=cutoff)
        err = max(err, res.truncation_error)
        new.append(res.left)
        carry = res.singular_values.reshape((-1,) + (1,) * (K + 1)) * res.right
        nrm = np.linalg.norm(carry)
        carry = carry / nrm
        log_scale += float(np.log(nrm))
    return BoundaryMps(new, center=n - 1, log_scale=log_scale, trunc_error=err,
                       exact=mps.exact and (exact_only or err < 1e-12))


def mps_overlap(a: BoundaryMps, b: BoundaryMps) -> complex:
    """``sum a * b`` over matching physical legs (no conjugation), with scales."""
    env = np.ones((1, 1), dtype=DTYPE)
    for ta, tb in zip(a.tensors, b.tensors):
        K = ta.ndim - 2
        p = list(range(10, 10 + K))
        env = einsum([2, 3], env, [0, 1], ta, [0] + p + [2], tb, [1] + p + [3])
    return complex(env.reshape(())) * np.exp(a.log_scale + b.log_scale)


# ---------------------------------------------------------------------------
# strip contraction between a lower and an upper boundary
# ---------------------------------------------------------------------------


@dataclass
class StripEnv:
    """Left/right environments of a strip of ``h`` rows between two boundaries.

    ``rows[j][x]`` are the stacks of the strip (bottom to top), ``bot``
    connects to the ``d`` legs of the first row and ``top`` to the ``u``
    legs of the last.  ``left[x]`` contracts columns ``< x`` and
    ``right[x]`` columns ``>= x``; each carries its own log scale.
    Environment axes are ``(bot bond, strip legs row-major, top bond)``.
    """

    rows: list
    bot: BoundaryMps
    top: BoundaryMps

    def __post_init__(self):
        n = len(self.rows[0])
        self.n = n
        self.h = len(self.rows)
        self.K = len(self.rows[0][0])
        self.left = [None] * (n + 1)
        self.right = [None] * (n + 1)
        self.left_log = [0.0] * (n + 1)
        self.right_log = [0.0] * (n + 1)
        shape = (1,) * (self.h * self.K + 2)
        self.left[0] = np.ones(shape, dtype=DTYPE)
        self.right[n] = np.ones(shape, dtype=DTYPE)
        self._left_done = 0
        self._right_done = n

    def _cut(self, i):
        """Labels of the vertical cut ``i`` (between column ``i-1`` and ``i``)."""
        base = 100 + 1000 * i
        return [2 * i] + [base + 10 * j + k for j in range(self.h) for k in range(self.K)] + [2 * i + 1]

    def _column(self, x, stacks, i):
        """Operands of column ``x`` placed between cuts ``i`` and ``i + 1``."""
        K, h = self.K, self.h
        lb, rb = 100 + 1000 * i, 100 + 1000 * (i + 1)
        priv = 1_000_000 * (i + 1)
        ops = [self.bot.tensors[x], [2 * i] + [priv + 300 + k for k in range(K)] + [2 * i + 2]]
        opens = []
        for j, stack in enumerate(stacks):
            counts = {}
            for _, extra in stack:
                for e in extra:
                    counts[e] = counts.get(e, 0) + 1
            eb = priv + 10000 + 1000 * j
            for k, (arr, extra) in enumerate(stack):
                d_ = priv + 300 + k if j == 0 else priv + 500 + 10 * j + k
                u_ = priv + 400 + k if j == h - 1 else priv + 500 + 10 * (j + 1) + k
                ops += [arr, [lb + 10 * j + k, rb + 10 * j + k, d_, u_] + [eb + e for e in extra]]
            opens += [eb + e for e in sorted(counts) if counts[e] == 1]
        ops += [self.top.tensors[x], [2 * i + 1] + [priv + 400 + k for k in range(K)] + [2 * i + 3]]
        return ops, opens

    def _stored(self, x):
        return [self.rows[j][x] for j in range(self.h)]

    def left_env(self, x):
        while self._left_done < x:
            i = self._left_done
            ops, opens = self._column(i, self._stored(i), 0)
            if opens:
                raise ValueError("stored strip columns must not carry open legs")
            e = einsum(self._cut(1), self.left[i], self._cut(0), *ops)
            nrm = np.linalg.norm(e)
            self.left[i + 1] = e / nrm
            self.left_log[i + 1] = self.left_log[i] + float(np.log(nrm))
            self._left_done = i + 1
        return self.left[x], self.left_log[x]

    def right_env(self, x):
        while self._right_done > x:
            i = self._right_done - 1
            ops, opens = self._column(i, self._stored(i), 0)
            if opens:
                raise ValueError("stored strip columns must not carry open legs")
            e = einsum(self._cut(0), self.right[i + 1], self._cut(1), *ops)
            nrm = np.linalg.norm(e)
            self.right[i] = e / nrm
            self.right_log[i] = self.right_log[i + 1] + float(np.log(nrm))
            self._right_done = i
        return self.right[x], self.right_log[x]

    def replace_column(self, x, stacks):
        """Overwrite stored column ``x`` and drop environments depending on it."""
        for j in range(self.h):
            self.rows[j][x] = stacks[j]
        self._left_done = min(self._left_done, x)
        self._right_done = max(self._right_done, x + 1)

    def value(self, x, columns):
        """Contract the strip with columns ``x, x+1, ...`` replaced by ``columns``.

        ``columns[i]`` is a list of stacks (bottom to top) or ``None`` for the
        stored column.  Returns ``(array over open legs, log_scale)``; open
        legs are ordered column by column, then row, then label.
        """
        w = len(columns)
        le, llog = self.left_env(x)
        re, rlog = self.right_env(x + w)
        # absorb one column at a time; a single many-operand einsum lets the
        # path search wander into huge intermediates
        env, opens = le, []
        for i, stacks in enumerate(columns):
            c, o = self._column(x + i, stacks if stacks is not None else self._stored(x + i), i)
            env = einsum(self._cut(i + 1) + opens + o, env, self._cut(i) + opens, *c)
            opens = opens + o
        out = einsum(opens, env, self._cut(w) + opens, re, self._cut(w))
        return out, llog + rlog + self.bot.log_scale + self.top.log_scale


def strip_value(rows, bot, top):
    """Scalar (or open-leg array) of a whole strip, with its log scale."""
    env = StripEnv(rows, bot, top)
    return env.value(0, [None] * env.n)
