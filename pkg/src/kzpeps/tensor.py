"""Dense complex tensor algebra.

Tensors are plain ``numpy.ndarray`` objects of dtype ``complex128``.  The
helpers here add the bookkeeping that the network code needs on top of
numpy: pairwise contraction with dimension checks, truncated SVD with a
fixed gauge and a reported truncation error, and QR-based orthogonalization.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg

__all__ = [
    "ContractionError",
    "ZeroTensorError",
    "TruncatedSvd",
    "as_tensor",
    "contract",
    "matricize",
    "svd_truncate",
    "orthogonalize",
]

DTYPE = np.complex128
# relative spread below which neighbouring singular values count as degenerate
DEGENERACY_RTOL = 1e-10


class ContractionError(ValueError):
    """Raised when paired indices of a contraction have different sizes."""


class ZeroTensorError(ValueError):
    """Raised when a decomposition is requested for an all-zero tensor."""

    def __init__(self, msg="zero tensor has no SVD gauge"):
        super().__init__(msg)


def as_tensor(x) -> np.ndarray:
    """Return ``x`` as a complex128 array (no copy if already one)."""
    return np.asarray(x, dtype=DTYPE)


def contract(a, b, pairs: Sequence[tuple[int, int]]) -> np.ndarray:
    """Sum over the paired indices of ``a`` and ``b``.

    The result carries the unpaired indices of ``a`` (in order) followed by
    the unpaired indices of ``b``.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    ia = [p[0] for p in pairs]
    ib = [p[1] for p in pairs]
    for i, j in pairs:
        if not (-a.ndim <= i < a.ndim and -b.ndim <= j < b.ndim):
            raise ContractionError(f"index pair ({i}, {j}) out of range for ranks {a.ndim}, {b.ndim}")
        if a.shape[i] != b.shape[j]:
            raise ContractionError(
                f"dimension mismatch on pair ({i}, {j}): {a.shape[i]} != {b.shape[j]}"
            )
    return np.tensordot(a, b, axes=(ia, ib))


def matricize(t, row_indices: Sequence[int]):
    """Reshape ``t`` into a matrix with ``row_indices`` as rows.

    Returns ``(matrix, row_shape, col_shape)``.
    """
    t = np.asarray(t)
    rows = [i % t.ndim for i in row_indices]
    cols = [i for i in range(t.ndim) if i not in rows]
    if not rows or not cols or len(set(rows)) != len(rows):
        raise ValueError("row_indices must split the tensor into two non-empty groups")
    row_shape = tuple(t.shape[i] for i in rows)
    col_shape = tuple(t.shape[i] for i in cols)
    m = np.transpose(t, rows + cols).reshape(int(np.prod(row_shape)), int(np.prod(col_shape)))
    return m, row_shape, col_shape


def _svd(m):
    try:
        return scipy.linalg.svd(m, full_matrices=False, lapack_driver="gesdd", check_finite=False)
    except np.linalg.LinAlgError:
        return scipy.linalg.svd(m, full_matrices=False, lapack_driver="gesvd", check_finite=False)


@dataclass
class TruncatedSvd:
    """Result of :func:`svd_truncate`.

    ``left`` has shape ``row_shape + (k,)`` and ``right`` has shape
    ``(k,) + col_shape``.  ``truncation_error`` is the sum of the discarded
    singular values divided by the sum of all of them; ``discarded_norm`` is
    the l2 norm of the discarded values, which equals the Frobenius distance
    between the input and its truncated reconstruction.
    """

    left: np.ndarray
    singular_values: np.ndarray
    right: np.ndarray
    truncation_error: float
    discarded_norm: float = 0.0
    degenerate_split: bool = False

    @property
    def rank(self) -> int:
        return int(self.singular_values.size)

    def reconstruct(self) -> np.ndarray:
        k = self.rank
        us = self.left * self.singular_values
        return np.tensordot(us, self.right, axes=([us.ndim - 1], [0])) if k else np.zeros(
            self.left.shape[:-1] + self.right.shape[1:], dtype=DTYPE
        )


def _fix_gauge(u, vh):
    # largest-magnitude entry of each left vector made real-positive
    idx = np.argmax(np.abs(u), axis=0)
    ph = u[idx, np.arange(u.shape[1])]
    ph = ph / np.abs(ph)
    return u * ph.conj(), vh * ph[:, None]


def _matrix_rank(s, shape):
    if s.size == 0 or s[0] == 0.0:
        return 0
    tol = s[0] * max(shape) * np.finfo(float).eps
    return int(np.count_nonzero(s > tol))


def svd_truncate(t, row_indices: Sequence[int], max_rank: int | None = None, cutoff: float = 0.0):
    """Truncated singular value decomposition of ``t``.

    Parameters
    ----------
    t : array_like
        Input tensor.
    row_indices : sequence of int
        Indices forming the rows of the matricized tensor.
    max_rank : int, optional
        Upper bound on the number of kept singular values.
    cutoff : float
        Singular values with ``s / s_max <= cutoff`` are dropped.

    Returns
    -------
    TruncatedSvd
    """
    m, row_shape, col_shape = matricize(t, row_indices)
    if max_rank is not None and max_rank < 1:
        raise ValueError("max_rank must be a positive integer")
    if not np.any(m):
        raise ZeroTensorError()
    u, s, vh = _svd(m.astype(DTYPE, copy=False))
    rank = _matrix_rank(s, m.shape)
    keep_cut = int(np.count_nonzero(s / s[0] > cutoff)) if cutoff > 0 else s.size
    k = min(rank, keep_cut)
    degenerate_split = False
    if max_rank is not None and max_rank < k:
        k = max_rank
        if s[k - 1] - s[k] <= DEGENERACY_RTOL * s[0]:
            degenerate_split = True
    k = max(k, 1)
    u, vh = _fix_gauge(u[:, :k], vh[:k])
    total = float(s.sum())
    discarded = s[k:]
    return TruncatedSvd(
        left=u.reshape(row_shape + (k,)),
        singular_values=s[:k].copy(),
        right=vh.reshape((k,) + col_shape),
        truncation_error=float(discarded.sum() / total),
        discarded_norm=float(np.sqrt(np.sum(discarded**2))),
        degenerate_split=degenerate_split,
    )


def orthogonalize(t, row_indices: Sequence[int]):
    """Split ``t`` into an isometry over ``row_indices`` and a remainder.

    The isometry has shape ``row_shape + (k,)`` with ``k = min(rows, cols)``
    and satisfies ``iso^H iso = 1``; the remainder has shape
    ``(k,) + col_shape``.  The diagonal of the remainder (as an upper
    triangular matrix) is made real non-negative, so an input that already
    is an isometry returns the identity as remainder.
    """
    m, row_shape, col_shape = matricize(t, row_indices)
    if not np.any(m):
        raise ZeroTensorError()
    q, r = scipy.linalg.qr(m.astype(DTYPE, copy=False), mode="economic", check_finite=False)
    d = np.diagonal(r).copy()
    ph = np.where(np.abs(d) > 0, d / np.where(d == 0, 1, np.abs(d)), 1.0)
    q = q * ph
    r = r * ph.conj()[:, None]
    k = q.shape[1]
    return q.reshape(row_shape + (k,)), r.reshape((k,) + col_shape)
