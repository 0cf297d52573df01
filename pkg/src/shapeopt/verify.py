"""Taylor-remainder tests and the semi/full derivative equivalence audit.

The Taylor harness perturbs the domain by ``t * V`` through the deformation
machinery, re-solves the state when a PDE constraint is present, and fits
the decay order of the first/second remainders on a log-log scale.  Points
that have fallen to the roundoff floor are trimmed before fitting.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field as dataclass_field
from typing import List, Optional, Sequence

import numpy as np

from .fem import GridFunction
from .shapecalc import (
    ShapeProblem,
    cost_value,
    first_order,
    material_derivatives,
    second_order_constrained,
    second_order_unconstrained,
    solve_adjoint,
    solve_state,
)

__all__ = ["TaylorReport", "taylor_first", "taylor_second", "automation_audit",
           "default_t_list"]


def default_t_list() -> List[float]:
    return [0.1 * 2.0 ** (-k) for k in range(8)]


@dataclass
class TaylorReport:
    t: List[float]
    delta1: Optional[List[float]] = None
    delta2: Optional[List[float]] = None
    slope1: Optional[float] = None
    slope2: Optional[float] = None
    trimmed: int = 0

    def __post_init__(self):
        if len(self.t) < 4:
            raise ValueError("need at least four step sizes")
        if any(b >= a for a, b in zip(self.t, self.t[1:])):
            raise ValueError("step sizes must be strictly decreasing")

    def to_csv(self, path: str):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "delta1", "delta2"])
            for i, tv in enumerate(self.t):
                d1 = "" if self.delta1 is None else repr(self.delta1[i])
                d2 = "" if self.delta2 is None else repr(self.delta2[i])
                writer.writerow([repr(tv), d1, d2])


def _fit_slope(t: Sequence[float], deltas: Sequence[float], floor: float):
    """Least-squares slope of log(delta) vs log(t) above the roundoff floor."""
    t = np.asarray(t, dtype=float)
    deltas = np.asarray(deltas, dtype=float)
    keep = deltas > floor
    trimmed = int((~keep).sum())
    if keep.sum() < 2:
        return float("nan"), trimmed
    logs_t = np.log(t[keep])
    logs_d = np.log(deltas[keep])
    slope = np.polyfit(logs_t, logs_d, 1)[0]
    return float(slope), trimmed


def _perturbed_costs(prob: ShapeProblem, direction: GridFunction,
                     t_list: Sequence[float]) -> List[float]:
    vec = prob.vec
    saved_def = prob.mesh.deformation
    saved_state = None if prob.state is None else prob.state.vec.copy()
    costs = []
    try:
        for t in t_list:
            trial = GridFunction(vec, t * direction.vec)
            prob.mesh.set_deformation(trial)
            if prob.constrained:
                solve_state(prob)
            costs.append(cost_value(prob))
    finally:
        prob.mesh.deformation = saved_def
        if saved_state is not None:
            prob.state.vec[:] = saved_state
    return costs


def _prepare(prob: ShapeProblem):
    if prob.constrained:
        solve_state(prob)
        solve_adjoint(prob)


def taylor_first(prob: ShapeProblem, direction: GridFunction,
                 t_list: Optional[Sequence[float]] = None) -> TaylorReport:
    """First-order remainder |J(t) - J - t dJ(V)|; expected decay O(t^2)."""
    t_list = list(default_t_list() if t_list is None else t_list)
    if min(t_list) < 1e-4 or max(t_list) > 1e-1 + 1e-15:
        raise ValueError("step sizes must lie in [1e-4, 1e-1]")
    _prepare(prob)
    j0 = cost_value(prob)
    djv = float(first_order(prob, "full") @ direction.vec)
    costs = _perturbed_costs(prob, direction, t_list)
    delta1 = [abs(jt - j0 - t * djv) for jt, t in zip(costs, t_list)]
    slope, trimmed = _fit_slope(t_list, delta1, floor=1e-14 * max(abs(j0), 1.0))
    return TaylorReport(t=t_list, delta1=delta1, slope1=slope, trimmed=trimmed)


def taylor_second(prob: ShapeProblem, direction: GridFunction,
                  t_list: Optional[Sequence[float]] = None) -> TaylorReport:
    """Second-order remainder; expected decay O(t^3) above the roundoff floor."""
    t_list = list(default_t_list() if t_list is None else t_list)
    if min(t_list) < 1e-4 or max(t_list) > 1e-1 + 1e-15:
        raise ValueError("step sizes must lie in [1e-4, 1e-1]")
    _prepare(prob)
    j0 = cost_value(prob)
    dj = first_order(prob, "full")
    djv = float(dj @ direction.vec)
    if prob.constrained:
        md = material_derivatives(prob, direction)
        d2 = second_order_constrained(prob, direction, direction, md)
    else:
        H = second_order_unconstrained(prob)
        d2 = float(direction.vec @ (H @ direction.vec))
    costs = _perturbed_costs(prob, direction, t_list)
    delta1 = [abs(jt - j0 - t * djv) for jt, t in zip(costs, t_list)]
    delta2 = [
        abs(jt - j0 - t * djv - 0.5 * t * t * d2) for jt, t in zip(costs, t_list)
    ]
    floor = 1e-12 * max(abs(j0), 1.0)
    slope1, _ = _fit_slope(t_list, delta1, floor=1e-14 * max(abs(j0), 1.0))
    slope2, trimmed = _fit_slope(t_list, delta2, floor=floor)
    return TaylorReport(
        t=t_list, delta1=delta1, delta2=delta2, slope1=slope1, slope2=slope2,
        trimmed=trimmed,
    )


def automation_audit(prob: ShapeProblem) -> float:
    """Max absolute gap between semi- and fully-automated derivative vectors."""
    _prepare(prob)
    semi = first_order(prob, "semi")
    full = first_order(prob, "full")
    return float(np.max(np.abs(semi - full)))
