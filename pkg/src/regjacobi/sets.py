"""Per-agent feasible sets, projections and the local strictly convex QP solver.

Three set variants are supported:

* :class:`Box` -- ``lower <= z <= upper``;
* :class:`BudgetBox` -- a box intersected with ``sum(z) == gamma``;
* :class:`Polytope` -- ``A z <= b`` intersected with an enclosing box.

Every local problem is ``min_z z'Hz + b'z`` over one set, with ``H``
symmetric positive definite.  Diagonal ``H`` on a box is a clamp, diagonal
``H`` on a budget box is a one-multiplier search, and everything else goes
through a small dense primal active-set method.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from regjacobi.errors import InfeasibleSetError, InvalidArgumentError, NumericalFailure

BUDGET_TOL = 1e-12
MAX_BUDGET_STEPS = 200
KKT_RTOL = 1e-9


def _vec(a, name):
    a = np.array(a, dtype=float).reshape(-1)
    if a.size == 0:
        raise InvalidArgumentError(f"{name} must be non-empty")
    if not np.all(np.isfinite(a)):
        raise InvalidArgumentError(f"{name} must be finite")
    a.setflags(write=False)
    return a


def _bounds(lower, upper):
    lower, upper = _vec(lower, "lower"), _vec(upper, "upper")
    if lower.shape != upper.shape:
        raise InvalidArgumentError("lower and upper must have the same length")
    if np.any(lower > upper):
        raise InfeasibleSetError("lower > upper in some coordinate")
    return lower, upper


@dataclass(frozen=True)
class Box:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower, upper = _bounds(self.lower, self.upper)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @property
    def dim(self):
        return self.lower.size

    def contains(self, z, tol=1e-9):
        z = np.asarray(z, dtype=float)
        return bool(np.all(z >= self.lower - tol) and np.all(z <= self.upper + tol))

    def constraints(self):
        n = self.dim
        eye = np.eye(n)
        return np.vstack([eye, -eye]), np.concatenate([self.upper, -self.lower]), np.zeros((0, n)), np.zeros(0)


@dataclass(frozen=True)
class BudgetBox:
    """Box with the equality budget ``sum(z) == gamma``."""

    lower: np.ndarray
    upper: np.ndarray
    gamma: float

    def __post_init__(self):
        lower, upper = _bounds(self.lower, self.upper)
        gamma = float(self.gamma)
        slack = 1e-12 * (1.0 + abs(gamma))
        if not lower.sum() - slack <= gamma <= upper.sum() + slack:
            raise InfeasibleSetError(
                f"budget {gamma} outside [{lower.sum()}, {upper.sum()}]")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "gamma", gamma)

    @property
    def dim(self):
        return self.lower.size

    def contains(self, z, tol=1e-9):
        z = np.asarray(z, dtype=float)
        return bool(np.all(z >= self.lower - tol) and np.all(z <= self.upper + tol)
                    and abs(z.sum() - self.gamma) <= tol * (1.0 + abs(self.gamma)))

    def constraints(self):
        n = self.dim
        eye = np.eye(n)
        return (np.vstack([eye, -eye]), np.concatenate([self.upper, -self.lower]),
                np.ones((1, n)), np.array([self.gamma]))


@dataclass(frozen=True)
class Polytope:
    """``{z : A z <= b, lower <= z <= upper}`` with a certified feasible point.

    When ``point`` is omitted the box midpoint is tried first, then a
    phase-one linear program.
    """

    A: np.ndarray
    b: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    point: np.ndarray | None = None

    def __post_init__(self):
        lower, upper = _bounds(self.lower, self.upper)
        A = np.atleast_2d(np.array(self.A, dtype=float))
        b = _vec(self.b, "b")
        if A.shape != (b.size, lower.size):
            raise InvalidArgumentError(f"A must be {b.size}x{lower.size}, got {A.shape}")
        A.setflags(write=False)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        point = self.point
        if point is None:
            point = self._find_point()
        point = _vec(point, "point")
        if not self.contains(point, tol=1e-12):
            raise InfeasibleSetError("certified point violates the polytope")
        object.__setattr__(self, "point", point)

    def _find_point(self):
        mid = 0.5 * (self.lower + self.upper)
        if np.all(self.A @ mid <= self.b):
            return mid
        from scipy.optimize import linprog

        # maximize the uniform slack t: A z + t <= b, box on z, t <= 1
        n, r = self.lower.size, self.b.size
        cost = np.zeros(n + 1)
        cost[-1] = -1.0
        A_ub = np.hstack([self.A, np.ones((r, 1))])
        bounds = list(zip(self.lower, self.upper)) + [(None, 1.0)]
        res = linprog(cost, A_ub=A_ub, b_ub=self.b, bounds=bounds, method="highs")
        if res.status != 0 or res.x[-1] < 0:
            raise InfeasibleSetError("polytope is empty")
        return np.clip(res.x[:n], self.lower, self.upper)

    @property
    def dim(self):
        return self.lower.size

    def contains(self, z, tol=1e-9):
        z = np.asarray(z, dtype=float)
        return bool(np.all(z >= self.lower - tol) and np.all(z <= self.upper + tol)
                    and np.all(self.A @ z <= self.b + tol * (1.0 + np.abs(self.b))))

    def constraints(self):
        n = self.dim
        eye = np.eye(n)
        return (np.vstack([self.A, eye, -eye]), np.concatenate([self.b, self.upper, -self.lower]),
                np.zeros((0, n)), np.zeros(0))


FeasibleSet = Box | BudgetBox | Polytope


@dataclass(frozen=True)
class LocalQP:
    """``min_z z'Hz + b'z`` over ``set``; ``H`` must be symmetric positive definite."""

    H: np.ndarray
    b: np.ndarray
    set: FeasibleSet

    def __post_init__(self):
        H = np.atleast_2d(np.array(self.H, dtype=float))
        b = np.array(self.b, dtype=float).reshape(-1)
        n = self.set.dim
        if H.shape != (n, n) or b.shape != (n,):
            raise InvalidArgumentError(f"H must be {n}x{n} and b length {n}")
        _check_spd(H, "H")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "b", b)


def _check_spd(W, name):
    if not np.allclose(W, W.T, rtol=0, atol=1e-12 * (1.0 + np.abs(W).max())):
        raise InvalidArgumentError(f"{name} must be symmetric")
    try:
        np.linalg.cholesky(W)
    except np.linalg.LinAlgError:
        raise InvalidArgumentError(f"{name} must be positive definite") from None


def _is_diagonal(H):
    return not np.any(H - np.diag(np.diag(H)))


def budget_box_solve_batch(h, b, lower, upper, gamma):
    """Solve ``k`` independent diagonal budget-box QPs at once.

    Row ``r`` is ``min sum_j h_j z_j^2 + b_j z_j`` subject to
    ``lower <= z <= upper`` and ``sum(z) == gamma[r]``.  The minimizer is
    ``z(mu) = clip((-b - mu) / (2h), lower, upper)`` where the multiplier
    ``mu`` zeroes the budget residual; ``mu`` is bracketed and refined by
    bisection steps, each replaced by the exact piecewise-linear (Newton)
    update whenever that update stays inside the bracket.

    All array arguments have shape ``(k, n)`` except ``gamma`` which is
    ``(k,)``.  Returns ``z`` with shape ``(k, n)``.
    """
    h = np.asarray(h, dtype=float)
    b = np.asarray(b, dtype=float)
    lower = np.broadcast_to(np.asarray(lower, dtype=float), h.shape)
    upper = np.broadcast_to(np.asarray(upper, dtype=float), h.shape)
    gamma = np.asarray(gamma, dtype=float)
    if np.any(h <= 0):
        raise InvalidArgumentError("diagonal weights must be positive")
    center = -b / (2.0 * h)
    slope = 1.0 / (2.0 * h)
    lo = (-b - 2.0 * h * upper).min(axis=1)
    hi = (-b - 2.0 * h * lower).max(axis=1)
    tol = BUDGET_TOL * (1.0 + np.abs(gamma))

    mu = 0.5 * (lo + hi)
    z = np.clip(center - slope * mu[:, None], lower, upper)
    resid = z.sum(axis=1) - gamma
    done = np.abs(resid) <= tol
    for _ in range(MAX_BUDGET_STEPS):
        if done.all():
            break
        lo = np.where(resid > 0, mu, lo)
        hi = np.where(resid < 0, mu, hi)
        free = (z > lower) & (z < upper)
        free_slope = np.where(free, slope, 0.0).sum(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = mu + resid / free_slope
        ok = (free_slope > 0) & (newton > lo) & (newton < hi)
        mu_next = np.where(ok, newton, 0.5 * (lo + hi))
        mu = np.where(done, mu, mu_next)
        z = np.clip(center - slope * mu[:, None], lower, upper)
        resid = z.sum(axis=1) - gamma
        done = done | (np.abs(resid) <= tol) | (hi - lo <= 4 * np.finfo(float).eps * (np.abs(lo) + np.abs(hi)))
    # one more exact step on the free coordinates, kept only where it helps
    free_w = np.where((z > lower) & (z < upper), slope, 0.0)
    free_slope = free_w.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        share = np.where(free_slope > 0, resid / free_slope, 0.0)
    z_pol = np.clip(z - free_w * share[:, None], lower, upper)
    better = np.abs(z_pol.sum(axis=1) - gamma) < np.abs(resid)
    z = np.where(better[:, None], z_pol, z)
    # budgets that pin every coordinate to a bound
    z = np.where((gamma >= upper.sum(axis=1) - tol)[:, None], upper, z)
    z = np.where((gamma <= lower.sum(axis=1) + tol)[:, None], lower, z)
    resid = z.sum(axis=1) - gamma
    worst = np.abs(resid).max() if resid.size else 0.0
    if worst > 1e-10 * (1.0 + np.abs(gamma).max()):
        raise NumericalFailure("budget-box multiplier search did not converge", residual=float(worst))
    return z


def _active_set(H, b, G, g, E, e, z0, max_iter=None):
    """Primal active-set method for ``min z'Hz + b'z`` s.t. ``Ez = e``, ``Gz <= g``.

    ``z0`` must be feasible.  Returns the minimizer and the KKT residual.
    """
    n = b.size
    max_iter = max_iter or 50 * (n + G.shape[0]) + 100
    H2 = 2.0 * H
    z = np.array(z0, dtype=float)
    work: list[int] = []
    scale = 1.0 + np.abs(b).max()
    at_min = False
    row_norms = np.linalg.norm(G, axis=1)
    for _ in range(max_iter):
        A = np.vstack([E, G[work]]) if work else E
        k = A.shape[0]
        K = np.zeros((n + k, n + k))
        K[:n, :n] = H2
        K[:n, n:] = A.T
        K[n:, :n] = A
        rhs = np.concatenate([-(H2 @ z + b), np.zeros(k)])
        try:
            sol = np.linalg.solve(K, rhs)
        except np.linalg.LinAlgError:
            sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
        p = sol[:n]
        mult = sol[n:]
        if at_min or np.linalg.norm(p) <= 1e-13 * (1.0 + np.linalg.norm(z)):
            lam = mult[E.shape[0]:]
            if lam.size == 0 or lam.min() >= -1e-12 * scale:
                lam_full = np.zeros(G.shape[0])
                lam_full[work] = np.maximum(lam, 0.0)
                resid = _kkt_residual(H2, b, G, g, E, e, z, lam_full, mult[:E.shape[0]])
                return z, resid
            work.pop(int(np.argmin(lam)))
            at_min = False
            continue
        Gp = G @ p
        slack = np.maximum(g - G @ z, 0.0)
        alpha, block = 1.0, -1
        for j in np.flatnonzero(Gp > 1e-14 * np.linalg.norm(p) * row_norms):
            if j in work:
                continue
            a = slack[j] / Gp[j]
            if a < alpha:
                alpha, block = a, int(j)
        z = z + alpha * p
        if block >= 0:
            work.append(block)
            at_min = False
        else:
            at_min = True
    raise NumericalFailure("active-set iteration cap reached")


def _kkt_residual(H2, b, G, g, E, e, z, lam, nu):
    stat = H2 @ z + b + G.T @ lam + (E.T @ nu if E.size else 0.0)
    primal = np.maximum(G @ z - g, 0.0)
    eq = E @ z - e if E.size else np.zeros(0)
    comp = lam * (g - G @ z)
    return float(max(np.abs(stat).max(initial=0.0), primal.max(initial=0.0),
                     np.abs(eq).max(initial=0.0), np.abs(comp).max(initial=0.0)))


def _solve(H, b, s):
    """Unvalidated local solve used by the iteration engines."""
    if _is_diagonal(H) and not isinstance(s, Polytope):
        h = np.diag(H)
        if isinstance(s, Box):
            return np.clip(-b / (2.0 * h), s.lower, s.upper)
        return budget_box_solve_batch(h[None], b[None], s.lower[None], s.upper[None],
                                      np.array([s.gamma]))[0]
    G, g, E, e = s.constraints()
    z, resid = _active_set(H, b, G, g, E, e, feasible_point(s))
    if resid > KKT_RTOL * (1.0 + np.linalg.norm(b)):
        raise NumericalFailure("local QP did not reach the KKT tolerance", residual=resid)
    if not isinstance(s, Polytope):
        z = np.clip(z, s.lower, s.upper)
    return z


def solve_local_qp(qp: LocalQP):
    """Unique minimizer of ``z'Hz + b'z`` over ``qp.set``."""
    return _solve(qp.H, qp.b, qp.set)


def project_weighted(s, v, W):
    """``argmin_{z in s} (z - v)' W (z - v)`` for symmetric positive definite ``W``."""
    W = np.atleast_2d(np.array(W, dtype=float))
    v = np.array(v, dtype=float).reshape(-1)
    if v.size != s.dim or W.shape != (s.dim, s.dim):
        raise InvalidArgumentError("dimension mismatch between set, point and weight")
    _check_spd(W, "W")
    return _solve(W, -2.0 * (W @ v), s)


def project_euclidean(s, v):
    v = np.array(v, dtype=float).reshape(-1)
    if v.size != s.dim:
        raise InvalidArgumentError("dimension mismatch between set and point")
    return _solve(np.eye(s.dim), -2.0 * v, s)


def feasible_point(s):
    """Deterministic point of ``s``: the box midpoint, an even budget spread,
    or the polytope's certified point."""
    if isinstance(s, Box):
        return 0.5 * (s.lower + s.upper)
    if isinstance(s, BudgetBox):
        z = np.clip(np.full(s.dim, s.gamma / s.dim), s.lower, s.upper)
        if abs(z.sum() - s.gamma) <= BUDGET_TOL * (1.0 + abs(s.gamma)):
            return z
        return project_euclidean(s, np.full(s.dim, s.gamma / s.dim))
    return np.array(s.point)


def sample_point(s, rng):
    """Random point of ``s``: projection of a uniform draw from a widened box."""
    width = s.upper - s.lower
    v = s.lower + width * rng.uniform(-0.25, 1.25, size=s.dim)
    return project_euclidean(s, v)


def set_to_dict(s):
    if isinstance(s, Box):
        return {"type": "box", "lower": s.lower.tolist(), "upper": s.upper.tolist()}
    if isinstance(s, BudgetBox):
        return {"type": "budget_box", "lower": s.lower.tolist(), "upper": s.upper.tolist(),
                "gamma": s.gamma}
    return {"type": "polytope", "A": s.A.tolist(), "b": s.b.tolist(), "lower": s.lower.tolist(),
            "upper": s.upper.tolist(), "point": s.point.tolist()}


def set_from_dict(d):
    try:
        kind = d["type"]
        if kind == "box":
            return Box(d["lower"], d["upper"])
        if kind == "budget_box":
            return BudgetBox(d["lower"], d["upper"], d["gamma"])
        if kind == "polytope":
            return Polytope(d["A"], d["b"], d["lower"], d["upper"], d.get("point"))
    except KeyError as exc:
        raise InvalidArgumentError(f"set entry is missing key {exc}") from None
    raise InvalidArgumentError(f"unknown set type {d.get('type')!r}")
