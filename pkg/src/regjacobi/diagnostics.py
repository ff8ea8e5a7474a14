"""Centralized reference solver and numerical checks of the convergence theory.

Every check returns a :class:`DiagnosticsReport` whose ``passed`` flag is
``max_violation <= tolerance``.  Sampling is seeded and the seed is stored
in the report.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from regjacobi.errors import InvalidArgumentError, NumericalFailure
from regjacobi.iteration import IterationConfig, fixed_point_residual, jacobi_step, run, tie_break_map
from regjacobi.problem import BlockPartition, QuadraticObjective, is_quadratic, stacked_gradient
from regjacobi.sets import (Box, BudgetBox, Polytope, budget_box_solve_batch, feasible_point,
                            project_euclidean, sample_point)
from regjacobi.spectral import _shifted_ops, compute_bounds, lambda_max_sym

ORACLE_TOL = 1e-9
ORACLE_MAX_ITER = 500_000


@dataclass(frozen=True)
class DiagnosticsReport:
    check: str
    instance: str
    samples: int
    max_violation: float
    tolerance: float
    seed: int | None = None

    @property
    def passed(self):
        return bool(self.max_violation <= self.tolerance)

    def to_json(self):
        d = asdict(self)
        d["pass"] = self.passed
        d["violation"] = d.pop("max_violation")
        return json.dumps(d)


def project_product(partition, sets, v):
    """Euclidean projection onto ``X^1 x ... x X^m``."""
    if partition.is_uniform() and all(type(s) is BudgetBox for s in sets):
        k, size = partition.m, partition.sizes[0]
        lower = np.array([s.lower for s in sets])
        upper = np.array([s.upper for s in sets])
        gamma = np.array([s.gamma for s in sets])
        z = budget_box_solve_batch(np.ones((k, size)), -2.0 * v.reshape(k, size), lower, upper, gamma)
        return z.reshape(-1)
    if all(type(s) is Box for s in sets):
        lower = np.concatenate([s.lower for s in sets])
        upper = np.concatenate([s.upper for s in sets])
        return np.clip(v, lower, upper)
    return np.concatenate([project_euclidean(s, v[partition.block(i)]) for i, s in enumerate(sets)])


def gradient_map_residual(obj, sets, x, L):
    """``||x - P_X(x - grad f(x) / L)||``, zero exactly at minimizers."""
    return float(np.linalg.norm(x - project_product(obj.partition, sets, x - obj.gradient(x) / L)))


def _smoothness(obj):
    if is_quadratic(obj):
        op_q, _ = _shifted_ops(obj)
        return 2.0 * lambda_max_sym(op_q)
    return float(obj.lipschitz_L)


def solve_centralized(obj, sets, x0=None, tol=ORACLE_TOL, max_iter=ORACLE_MAX_ITER):
    """Minimize ``f`` over the product set with restarted accelerated
    projected gradient (step ``1/L``, ``L = 2 lambda_max(Q)`` for quadratics).

    Momentum is reset whenever the objective increases.  Stops once the
    gradient-map residual is at most ``tol``.  Returns ``(x*, f*)``.
    """
    p = obj.partition
    L = _smoothness(obj)
    if L <= 0:
        # constant objective: any feasible point is optimal
        x = np.concatenate([feasible_point(s) for s in sets])
        return x, obj.value(x)
    x = np.concatenate([feasible_point(s) for s in sets]) if x0 is None else np.array(x0, dtype=float)
    x = project_product(p, sets, x)
    y, t = x, 1.0
    fx = obj.value(x)
    resid = math.inf
    for _ in range(max_iter):
        x_new = project_product(p, sets, y - obj.gradient(y) / L)
        f_new = obj.value(x_new)
        resid = float(np.linalg.norm(x_new - y))
        if resid <= tol:
            true_resid = gradient_map_residual(obj, sets, x_new, L)
            if true_resid <= tol:
                return x_new, f_new
        if f_new > fx and t > 1.0:
            # restart from the better point without momentum
            y, t = x, 1.0
            continue
        t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        y = x_new + ((t - 1.0) / t_new) * (x_new - x)
        x, fx, t = x_new, f_new, t_new
    raise NumericalFailure("centralized solver hit the iteration cap", residual=resid)


def _sample(partition, sets, rng):
    return np.concatenate([sample_point(s, rng) for s in sets])


def _describe(obj):
    return f"m={obj.partition.m} n={obj.partition.n}"


def check_firm_nonexpansive(obj, sets, c, n_pairs=1000, seed=0, tolerance=1e-9):
    """Sample feasible pairs and test
    ``||Tx - Ty||_W^2 <= (x - y)' W (Tx - Ty)`` with ``W = Q_d + cI - Q``."""
    if not is_quadratic(obj):
        raise InvalidArgumentError("firm nonexpansiveness check needs a quadratic objective")
    rng = np.random.default_rng(seed)

    def W(v):
        return c * v - obj.offdiag_matvec(v)

    worst = -math.inf
    for _ in range(n_pairs):
        x = _sample(obj.partition, sets, rng)
        y = _sample(obj.partition, sets, rng)
        d = jacobi_step(obj, sets, x, c) - jacobi_step(obj, sets, y, c)
        lhs = d @ W(d)
        rhs = (x - y) @ W(d)
        worst = max(worst, float(lhs - rhs))
    return DiagnosticsReport("firm_nonexpansive", _describe(obj), n_pairs, worst, tolerance, seed)


def descent_coefficient(mode, constants):
    """Per-step coefficient ``a`` in ``f(x_{k+1}) <= f(x_k) + a ||x_{k+1} - x_k||^2``.

    ``eq33``: scaled projected gradient, ``a = -(c - lambda_q_max)``.
    ``eq55``: Jacobi, ``a = (-c + (m-1)(K - 2c)) / m`` with
    ``K = 2 lambda_qz_max`` for quadratics or ``K = sqrt(m) L``.
    ``monotone``: ``a = 0``.
    """
    c = constants.get("c")
    if mode == "eq33":
        return -(c - constants["lambda_q_max"])
    if mode == "eq55":
        m = constants["m"]
        if "lambda_qz_max" in constants:
            K = 2.0 * constants["lambda_qz_max"]
        elif "L" in constants:
            K = math.sqrt(m) * constants["L"]
        else:
            raise InvalidArgumentError("eq55 needs lambda_qz_max or L")
        return (-c + (m - 1) * (K - 2.0 * c)) / m
    if mode == "monotone":
        return 0.0
    raise InvalidArgumentError(f"unknown descent mode {mode!r}")


def check_descent(trace, mode, constants, tolerance=1e-9):
    """Verify the per-iteration descent inequality along a recorded trace.

    The violation at step ``k`` is the inequality's slack deficit divided by
    ``1 + |f(x_k)|``.
    """
    f = trace.objectives
    s = trace.step_norms
    if f.size < 2 or np.any(np.isnan(f)):
        raise InvalidArgumentError("trace has no recorded objectives")
    a = descent_coefficient(mode, constants)
    viol = (f[1:] - f[:-1] - a * s[:-1] ** 2) / (1.0 + np.abs(f[:-1]))
    return DiagnosticsReport(f"descent_{mode}", f"{trace.method} c={trace.c:.6g}", int(viol.size),
                             float(viol.max()), tolerance)


def check_lipschitz_stacked(obj, sets, n_triples=1000, seed=0, bound="auto", tolerance=1e-9):
    """Sample triples ``(x, y, z)`` and compare
    ``||S(z, x) - S(z, y)||`` (``S`` the stacked block gradient) with
    ``K ||x - y||``.

    ``bound="lipschitz"`` uses ``K = sqrt(m) L`` (``L = 2 lambda_max(Q)`` for
    quadratics), ``bound="coupling"`` uses ``K = 2 lambda_max(Q_z)``;
    ``"auto"`` picks the coupling bound for quadratics.  The violation is
    ``(lhs - K ||x - y||) / max(1, K ||x - y||)``.
    """
    m = obj.partition.m
    if bound == "auto":
        bound = "coupling" if is_quadratic(obj) else "lipschitz"
    if bound == "coupling":
        if not is_quadratic(obj):
            raise InvalidArgumentError("coupling bound needs a quadratic objective")
        K = 2.0 * compute_bounds(obj).lambda_qz_max
    elif bound == "lipschitz":
        K = math.sqrt(m) * _smoothness(obj)
    else:
        raise InvalidArgumentError(f"unknown bound {bound!r}")
    rng = np.random.default_rng(seed)
    worst = -math.inf
    for _ in range(n_triples):
        x, y, z = (_sample(obj.partition, sets, rng) for _ in range(3))
        lhs = np.linalg.norm(stacked_gradient(obj, z, x) - stacked_gradient(obj, z, y))
        rhs = K * np.linalg.norm(x - y)
        worst = max(worst, float((lhs - rhs) / max(1.0, rhs)))
    return DiagnosticsReport(f"lipschitz_stacked_{bound}", _describe(obj), n_triples, worst,
                             tolerance, seed)


def equivalence_report(obj, sets, c, n_points=20, seed=0):
    """Minimizers versus fixed points on a small instance.

    (a) the oracle minimizer is a fixed point of both the regularized Jacobi
    map and the tie-break map; (b) the Jacobi limit attains the optimal
    value; (c) sampled points with clearly suboptimal value are not fixed
    points.  Violations are the excesses over the respective thresholds, so
    the report passes at tolerance 0.
    """
    x_star, f_star = solve_centralized(obj, sets)
    scale = 1.0 + abs(f_star)
    violations = [
        fixed_point_residual(obj, sets, x_star, c) - 1e-7,
        float(np.linalg.norm(tie_break_map(obj, sets, x_star) - x_star)) - 1e-6,
    ]
    trace = run(obj, sets, IterationConfig(c=c, tol_step=1e-10, record_objective=False))
    violations.append(obj.value(trace.x) - f_star - 1e-6 * scale)
    rng = np.random.default_rng(seed)
    tested = 0
    for _ in range(n_points):
        x = _sample(obj.partition, sets, rng)
        if obj.value(x) > f_star + 1e-3:
            tested += 1
            violations.append(1e-6 - fixed_point_residual(obj, sets, x, c))
    return DiagnosticsReport("equivalence", _describe(obj), 3 + tested, float(max(violations)), 0.0, seed)


def random_instance(seed, m=None, max_n=10, singular=None):
    """Seeded random convex QP with mixed box, budget-box and polytope sets.

    Singular instances get ``q`` in the range of ``Q`` around a feasible
    center, so their minimizer set is typically not a single point.
    """
    rng = np.random.default_rng(seed)
    m = int(rng.integers(1, 5)) if m is None else m
    sizes = [int(rng.integers(1, 4)) for _ in range(m)]
    while sum(sizes) > max_n:
        sizes[int(np.argmax(sizes))] -= 1
    partition = BlockPartition(tuple(sizes))
    n = partition.n
    singular = bool(rng.integers(0, 2)) if singular is None else singular
    sets = []
    for size in sizes:
        lower = -rng.uniform(0.2, 1.0, size)
        upper = rng.uniform(0.2, 1.5, size)
        kind = int(rng.integers(0, 3))
        if kind == 1 and size > 1:
            w = rng.uniform(0.2, 0.8)
            sets.append(BudgetBox(lower, upper, w * lower.sum() + (1 - w) * upper.sum()))
        elif kind == 2:
            A = rng.normal(size=(2, size))
            mid = 0.5 * (lower + upper)
            sets.append(Polytope(A, A @ mid + rng.uniform(0.05, 0.5, 2), lower, upper))
        else:
            sets.append(Box(lower, upper))
    rank = int(rng.integers(1, n)) if singular and n > 1 else n
    B = rng.normal(size=(rank, n))
    Q = B.T @ B / n
    if singular and n > 1:
        center = np.concatenate([sample_point(s, rng) for s in sets])
        q = -2.0 * Q @ center
    else:
        q = rng.normal(size=n)
    return QuadraticObjective(Q, q, partition), sets


def line_minimizer_instance():
    """``f = (x1 + x2)^2 - (x1 + x2)`` on ``[0, 1]^2``: minimizers form a segment."""
    obj = QuadraticObjective(np.ones((2, 2)), [-1.0, -1.0], BlockPartition((1, 1)))
    return obj, [Box([0.0], [1.0]), Box([0.0], [1.0])]


def regression_set(count=20):
    """Fixed instances for the checker suite: the segment-minimizer case plus seeded randoms."""
    out = [line_minimizer_instance()]
    seed = 0
    while len(out) < count:
        out.append(random_instance(seed))
        seed += 1
    return out
