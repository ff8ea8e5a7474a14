"""Regularized Jacobi and scaled projected gradient iterations.

One Jacobi step lets every agent minimize the shared objective over its own
block, the other blocks frozen at the current iterate, plus the proximal
penalty ``c * ||z^i - x^i||^2``.  For quadratics the local problem is the QP
with ``H_i = Q_ii + c I`` and ``b_i = 2 (Q_z x)_i - 2 c x^i + q_i``.  The m
local solves read the same snapshot and write disjoint blocks, so the result
does not depend on their order.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from regjacobi.errors import InvalidArgumentError, NumericalFailure
from regjacobi.problem import is_quadratic, replace_block
from regjacobi.sets import (Box, BudgetBox, _active_set, _solve, budget_box_solve_batch,
                            feasible_point, project_euclidean)

METHODS = ("jacobi", "jacobi_projection", "gradient")
INNER_MAX_ITER = 100_000
INNER_TOL = 1e-12


@dataclass(frozen=True)
class IterationConfig:
    """Run settings.

    ``c = 0`` is accepted for the Jacobi methods (plain, unregularized
    Jacobi); the local problems must then be strictly convex on their own.
    ``objective_target``, when set, stops the run at the first ``k`` with
    ``f(x_k) <= objective_target``.
    """

    c: float
    method: str = "jacobi"
    max_iter: int = 10_000
    tol_step: float = 1e-9
    record_objective: bool = True
    record_residual: bool = False
    objective_target: float | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidArgumentError(f"method must be one of {METHODS}")
        if not self.c >= 0 or (self.c == 0 and self.method == "gradient"):
            raise InvalidArgumentError("c must be positive (nonnegative for jacobi)")
        if self.max_iter < 1:
            raise InvalidArgumentError("max_iter must be >= 1")
        if not self.tol_step > 0:
            raise InvalidArgumentError("tol_step must be positive")


@dataclass(frozen=True)
class IterationRecord:
    k: int
    f: float
    step_norm: float
    residual: float = math.nan


@dataclass
class IterationTrace:
    records: list[IterationRecord]
    x: np.ndarray
    converged: bool
    iterations: int
    method: str = "jacobi"
    c: float = math.nan
    extra: dict = field(default_factory=dict)

    @property
    def objectives(self):
        return np.array([r.f for r in self.records])

    @property
    def step_norms(self):
        return np.array([r.step_norm for r in self.records])

    def iterations_to(self, f_star, rel_tol=1e-6):
        """First ``k`` with ``(f(x_k) - f*) / |f*| < rel_tol``, or ``None``."""
        scale = abs(f_star) if f_star != 0 else 1.0
        for r in self.records:
            if (r.f - f_star) / scale < rel_tol:
                return r.k
        return None


def _check_feasible(partition, sets, x):
    for i, s in enumerate(sets):
        if not s.contains(x[partition.block(i)], tol=1e-8):
            raise InvalidArgumentError(f"block {i} of the iterate is infeasible")


def _blockwise_solve(partition, sets, Hs, b):
    """Solve ``min z_i'H_i z_i + b_i'z_i`` over every ``sets[i]``.

    Uniform diagonal budget-box (or box) families are solved as one batch.
    """
    n = partition.n
    uniform = partition.is_uniform()
    if uniform and all(type(s) is BudgetBox for s in sets) and all(_diag(H) for H in Hs):
        k, size = partition.m, partition.sizes[0]
        h = np.array([np.diag(H) for H in Hs])
        lower = np.array([s.lower for s in sets])
        upper = np.array([s.upper for s in sets])
        gamma = np.array([s.gamma for s in sets])
        try:
            return budget_box_solve_batch(h, b.reshape(k, size), lower, upper, gamma).reshape(n)
        except InvalidArgumentError:
            pass
    out = np.empty(n)
    for i, s in enumerate(sets):
        blk = partition.block(i)
        H = Hs[i]
        if type(s) is Box and _diag(H):
            h = np.diag(H)
            if np.any(h <= 0):
                raise NumericalFailure(f"local problem {i} is not strictly convex", index=i)
            out[blk] = np.clip(-b[blk] / (2.0 * h), s.lower, s.upper)
            continue
        try:
            np.linalg.cholesky(H)
        except np.linalg.LinAlgError:
            raise NumericalFailure(f"local problem {i} is not strictly convex", index=i) from None
        try:
            out[blk] = _solve(H, b[blk], s)
        except NumericalFailure as exc:
            exc.index = i
            raise
    return out


def _diag(H):
    return not np.any(H - np.diag(np.diag(H)))


def _local_hessians(obj, c):
    return [obj.diag_block(i) + c * np.eye(size) for i, size in enumerate(obj.partition.sizes)]


def jacobi_step(obj, sets, x, c):
    """One regularized Jacobi update ``x_{k+1}``.

    Block ``i`` of the result minimizes ``f(z^i, x^{-i}) + c ||z^i - x^i||^2``
    over ``sets[i]``.
    """
    p = obj.partition
    x = p.check(x)
    if is_quadratic(obj):
        b = 2.0 * obj.offdiag_matvec(x) - 2.0 * c * x + obj.q
        return _blockwise_solve(p, sets, _local_hessians(obj, c), b)
    if not c > 0:
        raise InvalidArgumentError("smooth objectives need c > 0")
    out = np.empty(p.n)
    for i, s in enumerate(sets):
        try:
            out[p.block(i)] = _smooth_local_solve(obj, s, i, x, c)
        except NumericalFailure as exc:
            exc.index = i
            raise
    return out


def _smooth_local_solve(obj, s, i, x, c):
    """Accelerated projected gradient on ``f(z, x^{-i}) + c ||z - x^i||^2``."""
    p = obj.partition
    blk = p.block(i)
    xi = x[blk]
    step = 1.0 / (obj.lipschitz_L + 2.0 * c)

    def grad(z):
        return obj.gradient(replace_block(x, i, z, p))[blk] + 2.0 * c * (z - xi)

    z = np.array(xi)
    y, t = z, 1.0
    for _ in range(INNER_MAX_ITER):
        z_new = project_euclidean(s, y - step * grad(y))
        if np.linalg.norm(z_new - y) <= INNER_TOL * (1.0 + np.linalg.norm(z_new)):
            return z_new
        t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        if (y - z_new) @ (z_new - z) > 0:
            t_new, y = 1.0, z_new
        else:
            y = z_new + ((t - 1.0) / t_new) * (z_new - z)
        z, t = z_new, t_new
    raise NumericalFailure("smooth local solve hit the iteration cap",
                           residual=float(np.linalg.norm(z_new - y)))


def xi_map(obj, x, c):
    """Unconstrained minimizer ``(Q_d + cI)^{-1} (c x - Q_z x - q/2)`` of the
    stacked Jacobi subproblem, solved block by block."""
    p = obj.partition
    x = p.check(x)
    rhs = c * x - obj.offdiag_matvec(x) - 0.5 * obj.q
    out = np.empty(p.n)
    for i, H in enumerate(_local_hessians(obj, c)):
        blk = p.block(i)
        out[blk] = np.linalg.solve(H, rhs[blk])
    return out


def jacobi_step_projection(obj, sets, x, c):
    """The Jacobi step computed as the ``(Q_d + cI)``-weighted projection of
    :func:`xi_map` onto the feasible set."""
    p = obj.partition
    xi = xi_map(obj, x, c)
    Hs = _local_hessians(obj, c)
    out = np.empty(p.n)
    for i, s in enumerate(sets):
        blk = p.block(i)
        out[blk] = _solve(Hs[i], -2.0 * (Hs[i] @ xi[blk]), s)
    return out


def gradient_step(obj, sets, x, c):
    """Scaled projected gradient step with step size ``1/(2c)`` and scaling
    ``W = Q_d / c + I``; the projection is in the ``W`` norm."""
    if not c > 0:
        raise InvalidArgumentError("gradient step needs c > 0")
    p = obj.partition
    x = p.check(x)
    g = obj.gradient(x)
    Ws = [obj.diag_block(i) / c + np.eye(size) for i, size in enumerate(p.sizes)]
    y = np.empty(p.n)
    for i, W in enumerate(Ws):
        blk = p.block(i)
        y[blk] = x[blk] - np.linalg.solve(W, g[blk]) / (2.0 * c)
    b = np.concatenate([-2.0 * (W @ y[p.block(i)]) for i, W in enumerate(Ws)])
    return _blockwise_solve(p, sets, Ws, b)


def fixed_point_residual(obj, sets, x, c):
    """``||T(x) - x||`` where ``T`` is the Jacobi map with coefficient ``c``."""
    x = obj.partition.check(x)
    return float(np.linalg.norm(jacobi_step(obj, sets, x, c) - x))


def tie_break_map(obj, sets, x, eps_tie=None):
    """Nearest-to-``x^i`` minimizer of every agent's unregularized local problem.

    Per agent, stage one finds a minimizer ``z*`` of ``g(z) = f(z, x^{-i})``
    over ``X^i`` by proximal-point iterations.  For a convex quadratic the
    minimizer set is exactly ``X^i`` intersected with
    ``{z : Q_ii z = Q_ii z*, l'z = l'z*}`` (``l`` the linear coefficient), so
    stage two projects ``x^i`` onto that slice.  With ``eps_tie`` given,
    stage two instead projects onto the relaxed level set
    ``{z in X^i : g(z) <= v_i + eps_tie}``.  Intended for small blocks.
    """
    if not is_quadratic(obj):
        raise InvalidArgumentError("tie_break_map needs a quadratic objective")
    p = obj.partition
    x = p.check(x)
    lin = 2.0 * obj.offdiag_matvec(x) + obj.q
    out = np.empty(p.n)
    for i, s in enumerate(sets):
        blk = p.block(i)
        Qii = obj.diag_block(i)
        out[blk] = _tie_break_block(Qii, lin[blk], s, x[blk], eps_tie)
    return out


def _local_minimizer(Qii, lin, s, start):
    eye = np.eye(start.size)
    top = float(np.linalg.eigvalsh(Qii)[-1])
    delta = 0.1 * top + 1e-3 * (1.0 + np.abs(lin).max())
    z = np.array(start)
    for _ in range(INNER_MAX_ITER):
        z_new = _solve(Qii + delta * eye, lin - 2.0 * delta * z, s)
        moved = np.linalg.norm(z_new - z)
        z = z_new
        if moved <= 1e-12 * (1.0 + np.linalg.norm(z)):
            return z
    raise NumericalFailure("tie-break stage 1 did not converge", residual=float(moved))


def _tie_break_block(Qii, lin, s, xi, eps_tie):
    n = xi.size
    eye = np.eye(n)
    z_star = _local_minimizer(Qii, lin, s, xi)

    def g(z):
        return float(z @ Qii @ z + lin @ z)

    if eps_tie is None:
        G, h, E_set, _ = s.constraints()
        E_all = np.vstack([E_set, Qii, lin[None, :]])
        _, sv, Vt = np.linalg.svd(E_all)
        rank = int(np.sum(sv > 1e-12 * max(sv.max(initial=0.0), 1e-300)))
        if rank == 0:
            return project_euclidean(s, xi)
        E = Vt[:rank]
        z, _ = _active_set(eye, -2.0 * xi, G, h, E, E @ z_star, z_star)
        return z

    level = g(z_star) + float(eps_tie)
    if g(xi) <= level:
        return np.array(xi)

    def z_of(mu):
        # argmin ||z - xi||^2 + mu g(z), scaled by 1/mu
        return _solve(Qii + eye / mu, lin - 2.0 * xi / mu, s)

    lo, hi = 0.0, 1.0
    while g(z_of(hi)) > level:
        lo, hi = hi, hi * 4.0
        if hi > 1e300:
            raise RuntimeError("tie-break stage 2 found no point within the tolerance")
    for _ in range(200):
        mid = math.sqrt(lo * hi) if lo > 0 else 0.5 * hi
        if g(z_of(mid)) > level:
            lo = mid
        else:
            hi = mid
        if lo > 0 and hi / lo - 1.0 < 1e-13:
            break
    return z_of(hi)


def iterate(step, x0, config, value=None, residual=None):
    """Picard iteration ``x_{k+1} = step(x_k)`` with trace recording.

    ``residual(x_k, x_{k+1})`` is recorded when given.  A
    :class:`NumericalFailure` from ``step`` is re-raised with the partial
    trace attached as ``exc.trace``.
    """
    x = np.array(x0, dtype=float)
    records = []
    converged = False
    target = config.objective_target
    want_f = value is not None and (config.record_objective or target is not None)
    for k in range(config.max_iter):
        f = value(x) if want_f else math.nan
        if target is not None and f <= target:
            converged = True
            break
        try:
            x_new = step(x)
        except NumericalFailure as exc:
            exc.trace = IterationTrace(records, x, False, k, config.method, config.c)
            raise
        s = float(np.linalg.norm(x_new - x))
        r = residual(x, x_new) if residual is not None else math.nan
        records.append(IterationRecord(k, f, s, r))
        x = x_new
        if s <= config.tol_step:
            converged = True
            break
    used = len(records)
    final_f = value(x) if want_f else math.nan
    records.append(IterationRecord(used, final_f, math.nan, math.nan))
    return IterationTrace(records, x, converged, used, config.method, config.c)


def initial_point(partition, sets):
    return np.concatenate([feasible_point(s) for s in sets]) if sets else np.zeros(partition.n)


def run(obj, sets, config, x0=None):
    """Iterate the configured method from ``x0`` (default: per-agent
    :func:`feasible_point`) until the step norm drops to ``config.tol_step``
    or ``config.max_iter`` steps are taken.  Non-convergence is reported in
    the trace, never raised."""
    p = obj.partition
    x0 = initial_point(p, sets) if x0 is None else p.check(x0, "x0")
    _check_feasible(p, sets, x0)
    c = config.c
    if config.method == "jacobi":
        step = lambda x: jacobi_step(obj, sets, x, c)  # noqa: E731
    elif config.method == "jacobi_projection":
        step = lambda x: jacobi_step_projection(obj, sets, x, c)  # noqa: E731
    else:
        step = lambda x: gradient_step(obj, sets, x, c)  # noqa: E731

    residual = None
    if config.method == "jacobi":
        residual = lambda x, x_new: float(np.linalg.norm(x_new - x))  # noqa: E731
    elif config.record_residual:
        residual = lambda x, x_new: fixed_point_residual(obj, sets, x, c)  # noqa: E731
    return iterate(step, x0, config, value=obj.value, residual=residual)


def _fmt(v):
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.17g}"


def trace_to_csv(trace):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["k", "f", "step_norm", "residual"])
    for r in trace.records:
        w.writerow([r.k, _fmt(r.f), _fmt(r.step_norm), _fmt(r.residual)])
    return buf.getvalue()


def write_trace_csv(trace, path):
    with open(path, "w", newline="") as fh:
        fh.write(trace_to_csv(trace))


def read_trace_csv(path):
    """Records from a trace CSV (missing fields come back as NaN)."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    def num(s):
        return float(s) if s else math.nan
    return [IterationRecord(int(r["k"]), num(r["f"]), num(r["step_norm"]), num(r["residual"]))
            for r in rows]
