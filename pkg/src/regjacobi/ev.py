"""Plug-in electric vehicle fleet charging.

The fleet minimizes ``(d + A x)' P (d + A x)`` with ``P = diag(p) / m`` and
``A = [I I ... I]`` (one identity per vehicle), subject to each vehicle's
energy budget and per-slot rate bounds.  The objective only couples vehicles
through the total demand ``x_bar = d + sum_i x^i``, so a Jacobi round needs
nothing but ``x_bar`` broadcast to every vehicle.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass

import numpy as np

from regjacobi.errors import InfeasibleSetError, InvalidArgumentError
from regjacobi.iteration import IterationConfig, iterate
from regjacobi.problem import BlockPartition, QuadraticObjective
from regjacobi.sets import BudgetBox, budget_box_solve_batch
from regjacobi.spectral import SymmetricOperator

DEFAULT_DEMAND = {"base": 9.0, "valley_depth": 3.0, "valley_center": 3.0, "valley_width": 4.0}


def synth_demand(horizon, base=9.0, valley_depth=3.0, valley_center=3.0, valley_width=4.0):
    """Smooth non-PEV demand ``base - depth * exp(-(t - center)^2 / width^2)``."""
    if not base > valley_depth >= 0:
        raise InvalidArgumentError("need base > valley_depth >= 0")
    if valley_width <= 0:
        raise InvalidArgumentError("valley_width must be positive")
    t = np.arange(horizon, dtype=float)
    return base - valley_depth * np.exp(-((t - valley_center) ** 2) / valley_width**2)


@dataclass(frozen=True)
class EVScenario:
    m: int
    horizon: int
    p: np.ndarray
    d: np.ndarray
    gamma: np.ndarray
    rate_lower: np.ndarray
    rate_upper: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        m, T = int(self.m), int(self.horizon)
        if m < 1 or T < 1:
            raise InvalidArgumentError("m and horizon must be >= 1")
        p = np.broadcast_to(np.asarray(self.p, dtype=float), (T,)).copy()
        d = np.broadcast_to(np.asarray(self.d, dtype=float), (T,)).copy()
        gamma = np.broadcast_to(np.asarray(self.gamma, dtype=float), (m,)).copy()
        lower = _rates(self.rate_lower, m, T)
        upper = _rates(self.rate_upper, m, T)
        if np.any(p <= 0):
            raise InvalidArgumentError("prices p(t) must be positive")
        if np.any(lower > upper):
            raise InvalidArgumentError("rate_lower exceeds rate_upper")
        slack = 1e-12 * (1.0 + np.abs(gamma))
        bad = np.flatnonzero((gamma < lower.sum(axis=1) - slack) | (gamma > upper.sum(axis=1) + slack))
        if bad.size:
            raise InfeasibleSetError(f"vehicle {bad[0]} cannot meet its energy budget", index=int(bad[0]))
        for name, a in (("p", p), ("d", d), ("gamma", gamma), ("rate_lower", lower), ("rate_upper", upper)):
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "horizon", T)

    @property
    def P(self):
        """Diagonal of ``P = diag(p) / m``."""
        return self.p / self.m


def _rates(r, m, T):
    r = np.asarray(r, dtype=float)
    if r.ndim == 1 and r.size == T:
        r = np.broadcast_to(r, (m, T))
    return np.broadcast_to(r, (m, T)).copy()


def fleet_scenario(m=100, horizon=25, price=0.15, gamma_range=(0.1, 0.3), rate_upper=0.02, seed=0,
                   demand=None):
    """Fleet with seeded uniform energy targets and a synthetic demand valley."""
    rng = np.random.default_rng(seed)
    gamma = rng.uniform(gamma_range[0], gamma_range[1], size=m)
    d = synth_demand(horizon, **DEFAULT_DEMAND) if demand is None else demand
    return EVScenario(m, horizon, price, d, gamma, 0.0, rate_upper, seed=seed)


class KroneckerObjective:
    """``Q = 1_{m x m} kron P`` with ``q = 2 A'P d`` and constant ``d'P d``, never
    materialized.  Values include the constant, i.e. they equal
    ``(d + A x)' P (d + A x)``."""

    def __init__(self, scenario):
        self.scenario = scenario
        self.m, self.T = scenario.m, scenario.horizon
        self.Pdiag = scenario.P
        self.d = scenario.d
        self.partition = BlockPartition.uniform(self.m, self.T)
        self.q = np.tile(2.0 * self.Pdiag * self.d, self.m)
        self.const = float(self.d @ (self.Pdiag * self.d))

    @property
    def n(self):
        return self.m * self.T

    def _agg(self, x):
        return np.asarray(x, dtype=float).reshape(self.m, self.T).sum(axis=0)

    def value(self, x):
        total = self.d + self._agg(x)
        return float(total @ (self.Pdiag * total))

    def gradient(self, x):
        return np.tile(2.0 * self.Pdiag * (self.d + self._agg(x)), self.m)

    def matvec(self, x):
        return np.tile(self.Pdiag * self._agg(x), self.m)

    def diag_block(self, i):
        return np.diag(self.Pdiag)

    def blockdiag_matvec(self, x):
        return (np.asarray(x, dtype=float).reshape(self.m, self.T) * self.Pdiag).reshape(-1)

    def offdiag_matvec(self, x):
        return self.matvec(x) - self.blockdiag_matvec(x)

    def spectral_operators(self):
        top = float(self.Pdiag.max())
        op_q = SymmetricOperator(self.n, self.matvec, self.m * top)
        op_qz = SymmetricOperator(self.n, self.offdiag_matvec, (self.m - 1) * top)
        return op_q, op_qz

    def dense(self):
        Q = np.kron(np.ones((self.m, self.m)), np.diag(self.Pdiag))
        return QuadraticObjective(Q, self.q, self.partition, const=self.const)


def assemble_ev(scenario, form="implicit"):
    """Quadratic objective and per-vehicle budget boxes of the charging problem.

    ``form="dense"`` materializes ``Q`` (intended for ``m <= 200``);
    ``"implicit"`` returns a :class:`KroneckerObjective`.
    """
    sets = []
    for i in range(scenario.m):
        try:
            sets.append(BudgetBox(scenario.rate_lower[i], scenario.rate_upper[i], scenario.gamma[i]))
        except InfeasibleSetError as exc:
            raise InfeasibleSetError(str(exc), index=i) from None
    obj = KroneckerObjective(scenario)
    if form == "dense":
        return obj.dense(), sets
    if form != "implicit":
        raise InvalidArgumentError(f"unknown form {form!r}")
    return obj, sets


def aggregate_jacobi_step(scenario, X, x_bar, c):
    """One Jacobi round driven by the broadcast aggregate ``x_bar``.

    Vehicle ``i`` minimizes
    ``(x_bar - x^i + z)' P (x_bar - x^i + z) + c ||z - x^i||^2`` over its
    budget box.  ``X`` has one row per vehicle.  Returns the new rows and
    the new aggregate ``d + sum_i x^i``.
    """
    X = np.asarray(X, dtype=float)
    P = scenario.P
    h = np.broadcast_to(P + c, X.shape)
    b = 2.0 * P * (x_bar - X) - 2.0 * c * X
    X_new = budget_box_solve_batch(h, b, scenario.rate_lower, scenario.rate_upper, scenario.gamma)
    total = scenario.d.copy()
    for row in X_new:
        total += row
    return X_new, total


def initial_charging(scenario):
    """Even spread of every budget, projected onto the rate bounds."""
    _, sets = assemble_ev(scenario)
    from regjacobi.sets import feasible_point

    return np.array([feasible_point(s) for s in sets])


def run_ev(scenario, config, X0=None):
    """Aggregate-form regularized Jacobi run; the trace stores the flattened
    stacked iterate and objective values including the constant term."""
    if config.method != "jacobi":
        raise InvalidArgumentError("run_ev only implements the Jacobi method")
    obj = KroneckerObjective(scenario)
    X0 = initial_charging(scenario) if X0 is None else np.asarray(X0, dtype=float)
    shape = (scenario.m, scenario.horizon)

    def step(x):
        X = x.reshape(shape)
        X_new, _ = aggregate_jacobi_step(scenario, X, scenario.d + X.sum(axis=0), config.c)
        return X_new.reshape(-1)

    def residual(x, x_new):
        return float(np.linalg.norm(x_new - x))

    return iterate(step, X0.reshape(-1), config, value=obj.value, residual=residual)


def iterations_table(scenario, c_values, f_star, rel_tol=1e-6, max_iter=10_000):
    """Iterations needed to bring ``(f(x_k) - f*) / f*`` under ``rel_tol`` for every ``c``.

    Rows are ``(c, k or None, converged)``.
    """
    rows = []
    target = f_star + rel_tol * abs(f_star)
    for c in c_values:
        # stop strictly below the target; the table reports the first such k
        cfg = IterationConfig(c=float(c), max_iter=max_iter, tol_step=1e-300,
                              objective_target=math.nextafter(target, -math.inf))
        trace = run_ev(scenario, cfg)
        k = trace.iterations_to(f_star, rel_tol)
        rows.append((float(c), k, k is not None))
    return rows


def valley_report(scenario, X):
    """Per-slot non-PEV, PEV and total demand plus a flatness score.

    Flatness is ``max_t total(t) - min_{t active} total(t)``, where a slot is
    active when the fleet's PEV demand is strictly inside its aggregate rate
    bounds.  With no active slot the minimum runs over all slots.
    """
    X = np.asarray(X, dtype=float).reshape(scenario.m, scenario.horizon)
    pev = X.sum(axis=0)
    total = scenario.d + pev
    lo = scenario.rate_lower.sum(axis=0)
    hi = scenario.rate_upper.sum(axis=0)
    tol = 1e-9 * (1.0 + np.abs(hi))
    active = (pev > lo + tol) & (pev < hi - tol)
    low = total[active].min() if active.any() else total.min()
    return {
        "t": list(range(scenario.horizon)),
        "nonpev": scenario.d.tolist(),
        "pev": pev.tolist(),
        "total": total.tolist(),
        "active_slots": np.flatnonzero(active).tolist(),
        "flatness": float(total.max() - low),
    }


def profile_to_csv(report):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "nonpev", "pev", "total"])
    for t, a, b, c in zip(report["t"], report["nonpev"], report["pev"], report["total"]):
        w.writerow([t, f"{a:.17g}", f"{b:.17g}", f"{c:.17g}"])
    return buf.getvalue()


def load_demand_csv(path):
    """Two-column ``t,demand`` CSV (header required) as a demand vector ordered by ``t``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["t", "demand"]:
            raise InvalidArgumentError("demand CSV needs the header 't,demand'")
        rows = [(int(r[0]), float(r[1])) for r in reader if r]
    rows.sort()
    if [t for t, _ in rows] != list(range(len(rows))):
        raise InvalidArgumentError("demand CSV must cover t = 0..T without gaps")
    return np.array([v for _, v in rows])


def scenario_from_dict(d, base_dir="."):
    import os

    try:
        m, horizon = int(d["m"]), int(d["horizon"])
        demand = d["d"]
        if isinstance(demand, dict):
            if "synth" in demand:
                demand = synth_demand(horizon, **demand["synth"])
            elif "csv" in demand:
                demand = load_demand_csv(os.path.join(base_dir, demand["csv"]))
            else:
                raise InvalidArgumentError("demand must be a list, {'synth': ...} or {'csv': ...}")
        gamma = d["gamma"]
        seed = None
        if isinstance(gamma, dict):
            lo, hi = gamma["uniform_range"]
            seed = int(gamma.get("seed", 0))
            gamma = np.random.default_rng(seed).uniform(lo, hi, size=m)
        return EVScenario(m, horizon, d["p"], demand, gamma, d.get("rate_lower", 0.0), d["rate_upper"],
                          seed=seed)
    except KeyError as exc:
        raise InvalidArgumentError(f"scenario is missing key {exc}") from None


def scenario_to_dict(s):
    return {"m": s.m, "horizon": s.horizon, "p": s.p.tolist(), "d": s.d.tolist(),
            "gamma": s.gamma.tolist(), "rate_lower": s.rate_lower.tolist(),
            "rate_upper": s.rate_upper.tolist()}


def load_scenario(path):
    import os

    with open(path) as fh:
        return scenario_from_dict(json.load(fh), base_dir=os.path.dirname(os.path.abspath(path)))
