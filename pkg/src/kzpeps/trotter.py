"""Second-order Trotter gate sequences shared by the PEPS and statevector engines.

One step of length ``dt`` at schedule point ``s_mid`` is

    exp(+i th X) . prod_groups prod_bonds exp(-i phi_b Z Z) . exp(+i th X)

with ``th = Gamma(s_mid) dt / 2`` applied to every site and
``phi_b = J(s_mid) J_b dt``.  All Ising factors commute, so the middle block
equals its own reverse and the step is symmetric; the bond groups (direction,
then parity of the lower site along that direction) only fix the order in
which truncations happen in the PEPS engine.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import AnnealSchedule, DisorderInstance, schedule_at

__all__ = ["GateLayer", "TrotterStep", "bond_groups", "make_step", "step_plan", "max_step_angle", "default_dt"]


@dataclass(frozen=True)
class GateLayer:
    """A set of mutually commuting gates.

    ``kind`` is ``"field"`` (``items`` are sites, ``angles`` the rotation
    angle of ``exp(+i a X)``) or ``"ising"`` (``items`` are bond indices,
    ``angles`` the phase of ``exp(-i a Z Z)``).
    """

    kind: str
    items: tuple
    angles: tuple


@dataclass(frozen=True)
class TrotterStep:
    dt: float
    s_mid: float
    gamma: float
    j: float
    layers: tuple

    @property
    def gate_order(self):
        return [(layer.kind, item, a) for layer in self.layers for item, a in zip(layer.items, layer.angles)]

    def is_palindromic(self) -> bool:
        """True when the layer sequence reads the same backwards.

        Ising layers are compared as one commuting block.
        """
        kinds = []
        for layer in self.layers:
            if layer.kind == "ising" and kinds and kinds[-1][0] == "ising":
                continue
            kinds.append((layer.kind, layer.angles if layer.kind == "field" else None))
        return kinds == kinds[::-1]


def bond_groups(lattice):
    """Bond indices grouped by (direction, parity of the lower site)."""
    groups = []
    for mu in range(3):
        for parity in (0, 1):
            groups.append(
                tuple(
                    k for k, bd in enumerate(lattice.bonds)
                    if bd.direction == mu and lattice.coord(bd.a)[mu] % 2 == parity
                )
            )
    return [g for g in groups if g]


def make_step(schedule: AnnealSchedule, instance: DisorderInstance, s_mid: float, dt: float,
              reverse_groups: bool = False) -> TrotterStep:
    gamma, j = schedule_at(schedule, min(max(s_mid, 0.0), 1.0))
    sites = tuple(range(instance.lattice.n_sites))
    theta = 0.5 * gamma * dt
    field = GateLayer("field", sites, (theta,) * len(sites))
    groups = bond_groups(instance.lattice)
    if reverse_groups:
        groups = groups[::-1]
    ising = [
        GateLayer("ising", g, tuple(float(j * instance.couplings[k] * dt) for k in g)) for g in groups
    ]
    return TrotterStep(dt, s_mid, gamma, j, (field, *ising, field))


def step_plan(t_a: float, dt: float, s_end: float, s_start: float = 0.0):
    """Yield ``(s_mid, dt_k)`` for steps covering ``s_start .. s_end``.

    The final step is shortened so that the ramp ends exactly at ``s_end``.
    """
    if t_a <= 0 or dt <= 0:
        raise ValueError("annealing time and time step must be positive")
    total = (s_end - s_start) * t_a
    n = max(1, math.ceil(total / dt - 1e-9))
    t = s_start * t_a
    for k in range(n):
        h = dt if k < n - 1 else total - (n - 1) * dt
        yield (t + 0.5 * h) / t_a, h
        t += h


def max_step_angle(schedule: AnnealSchedule, instance: DisorderInstance, dt: float, s_end: float = 1.0) -> float:
    s = schedule.s[schedule.s <= s_end]
    jmax = float(np.max(np.abs(instance.couplings))) if instance.n_bonds else 0.0
    return float(max(np.max(schedule.gamma[: s.size]) * dt, np.max(schedule.j[: s.size]) * jmax * dt))


def default_dt(schedule: AnnealSchedule, instance: DisorderInstance, max_angle: float = 0.05, s_end: float = 1.0) -> float:
    """Largest step keeping every per-step gate angle at or below ``max_angle``."""
    a1 = max_step_angle(schedule, instance, 1.0, s_end)
    return max_angle / a1 if a1 > 0 else max_angle
