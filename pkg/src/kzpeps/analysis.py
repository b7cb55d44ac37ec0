"""Kibble-Zurek bookkeeping and power-law fits of residual energy vs ramp time."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

__all__ = [
    "KzDomainWarning",
    "predicted_kz_exponent",
    "kz_length",
    "KzFit",
    "fit_power_law",
    "default_window",
    "KZPowerLaw",
]

log = logging.getLogger(__name__)


class KzDomainWarning(UserWarning):
    """Exponent inputs outside the physical domain."""


def predicted_kz_exponent(d: float, nu: float, z: float) -> float:
    """Exponent of ``Q ~ t_a**a``: ``a = -(d nu + z nu - 1) / (1 + z nu)``.

    >>> round(predicted_kz_exponent(3, 1 / 1.55, 1.3), 3)
    -0.965
    """
    if nu <= 0 or z <= 0:
        raise ValueError("nu and z must be positive")
    a = -(d * nu + z * nu - 1.0) / (1.0 + z * nu)
    if a >= 0:
        warnings.warn(f"non-negative Kibble-Zurek exponent {a:.3g}: excitations would grow with ramp time",
                      KzDomainWarning, stacklevel=2)
    return float(a)


def kz_length(tau_q, nu: float, z: float):
    """Kibble-Zurek length ``tau_q**(nu / (1 + z nu))`` with unit prefactor (diagnostics only)."""
    tau_q = np.asarray(tau_q, dtype=float)
    if np.any(tau_q <= 0):
        raise ValueError("tau_q must be positive")
    out = tau_q ** (nu / (1.0 + z * nu))
    return float(out) if out.ndim == 0 else out


@dataclass
class KzFit:
    exponent: float
    exponent_stderr: float
    prefactor: float
    window: tuple
    t_a: np.ndarray
    Q: np.ndarray
    sigma_Q: np.ndarray
    excluded: list = field(default_factory=list)
    weighted: bool = True

    def to_dict(self) -> dict:
        return {
            "exponent": self.exponent,
            "exponent_stderr": self.exponent_stderr,
            "prefactor": self.prefactor,
            "window": list(self.window),
            "points": [
                {"t_a_ns": float(t), "Q": float(q), "sigma_Q": float(s)} for t, q, s in zip(self.t_a, self.Q, self.sigma_Q)
            ],
            "excluded_t_a": list(self.excluded),
            "weighted": self.weighted,
        }


def default_window(t_a) -> tuple:
    """Largest-``t_a`` half of the grid (at least three points)."""
    t = np.sort(np.unique(np.asarray(t_a, dtype=float)))
    k = max(3, int(np.ceil(t.size / 2)))
    t = t[-k:]
    return float(t[0]), float(t[-1])


def _wls(x, y, sy):
    """Weighted straight-line fit; returns ``(slope, intercept, cov, weighted)``."""
    X = np.column_stack([x, np.ones_like(x)])
    weighted = bool(sy is not None and np.all(np.isfinite(sy)) and np.all(sy > 0))
    if weighted:
        w = 1.0 / sy**2
        A = X.T @ (w[:, None] * X)
        beta = np.linalg.solve(A, X.T @ (w * y))
        cov = np.linalg.inv(A)
    else:
        beta, *_ = np.linalg.lstsq(X, y, rcond=None)
        r = y - X @ beta
        dof = max(x.size - 2, 1)
        cov = np.linalg.inv(X.T @ X) * (r @ r / dof)
    return float(beta[0]), float(beta[1]), cov, weighted


def fit_power_law(points, window=None) -> KzFit:
    """Weighted least squares of ``log Q`` on ``log t_a``.

    Parameters
    ----------
    points : iterable of (t_a, Q, sigma_Q)
        ``sigma_Q`` may be 0 or NaN for deterministic values; the fit is
        then unweighted and the standard error comes from the residuals.
    window : (t_min, t_max), optional
        Inclusive range of ``t_a``; defaults to :func:`default_window`.

    Non-positive ``Q`` inside the window is dropped with a warning.  Fewer
    than three usable points raise ``ValueError``.
    """
    pts = np.asarray([tuple(map(float, p)) for p in points], dtype=float).reshape(-1, 3)
    if pts.shape[0] < 3:
        raise ValueError("a power-law fit needs at least three points")
    if window is None:
        window = default_window(pts[:, 0])
    lo, hi = window
    sel = (pts[:, 0] >= lo) & (pts[:, 0] <= hi)
    pts = pts[sel]
    bad = pts[:, 1] <= 0
    excluded = [float(t) for t in pts[bad, 0]]
    if excluded:
        warnings.warn(f"non-positive Q excluded at t_a = {excluded}", RuntimeWarning, stacklevel=2)
    pts = pts[~bad]
    if pts.shape[0] < 3:
        raise ValueError("fewer than three positive points inside the fit window")
    t, q, s = pts.T
    x = np.log(t)
    y = np.log(q)
    sy = s / q
    slope, icpt, cov, weighted = _wls(x, y, sy)
    return KzFit(slope, float(np.sqrt(cov[0, 0])), float(np.exp(icpt)), (float(lo), float(hi)),
                 t, q, s, excluded, weighted)


class KZPowerLaw(RegressorMixin, BaseEstimator):
    """Power-law regressor ``Q = c t_a**a`` fitted in log-log space.

    ``fit(X, y, sigma=None)`` takes ramp times ``X`` (shape ``(n,)`` or
    ``(n, 1)``), residual energies ``y`` and optional standard errors.
    Points outside ``window`` or with ``y <= 0`` are ignored.
    """

    def __init__(self, window=None):
        self.window = window

    def fit(self, X, y, sigma=None):
        X = np.asarray(X, dtype=float).reshape(-1)
        y = np.asarray(y, dtype=float).reshape(-1)
        s = np.full_like(y, np.nan) if sigma is None else np.asarray(sigma, dtype=float).reshape(-1)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = fit_power_law(zip(X, y, s), self.window)
        self.exponent_ = res.exponent
        self.exponent_stderr_ = res.exponent_stderr
        self.prefactor_ = res.prefactor
        self.fit_ = res
        self.n_features_in_ = 1
        return self

    def predict(self, X):
        check_is_fitted(self, "exponent_")
        X = np.asarray(X, dtype=float).reshape(-1)
        return self.prefactor_ * X**self.exponent_

    def score(self, X, y, sample_weight=None):
        """R^2 in log space."""
        check_is_fitted(self, "exponent_")
        ly = np.log(np.asarray(y, dtype=float).reshape(-1))
        lp = np.log(self.predict(X))
        ss_res = np.sum((ly - lp) ** 2)
        ss_tot = np.sum((ly - ly.mean()) ** 2)
        return float(1.0 - ss_res / ss_tot) if ss_tot > 0 else 1.0
