"""Extreme eigenvalues and the regularization thresholds built from them."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from regjacobi.errors import InvalidArgumentError, NumericalFailure

MAX_POWER_STEPS = 100_000
POLICIES = ("thm1", "thm3", "eq38", "grad", "manual")


@dataclass(frozen=True)
class SymmetricOperator:
    """Matrix-free symmetric operator.

    ``shift`` must bound every eigenvalue's magnitude (for instance the
    largest absolute row sum).
    """

    n: int
    matvec: Callable[[np.ndarray], np.ndarray]
    shift: float


def _as_operator(M):
    if isinstance(M, SymmetricOperator):
        return M
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[0] != M.shape[1]:
        raise InvalidArgumentError("matrix must be square")
    if np.abs(M - M.T).max(initial=0.0) > 1e-12 * (1.0 + np.abs(M).max(initial=0.0)):
        raise InvalidArgumentError("matrix must be symmetric")
    return SymmetricOperator(M.shape[0], lambda v: M @ v, float(np.abs(M).sum(axis=1).max()))


def _power(op, v, sigma, rtol):
    v = v / np.linalg.norm(v)
    w = op.matvec(v)
    rho = float(v @ w)
    for step in range(MAX_POWER_STEPS):
        resid = np.linalg.norm(w - rho * v)
        if resid <= rtol * sigma:
            return rho, step
        u = w + sigma * v
        v = u / np.linalg.norm(u)
        w = op.matvec(v)
        rho = float(v @ w)
    raise NumericalFailure("power iteration did not converge", residual=float(resid))


def lambda_max_sym(M, rtol=1e-11):
    """Largest eigenvalue of a symmetric matrix or :class:`SymmetricOperator`.

    Power iteration on ``M + sigma*I`` with ``sigma`` the absolute row-sum
    bound, so the shifted spectrum is nonnegative and the top eigenvalue
    dominates.  The run starts from the normalized all-ones vector and is
    repeated from a fixed pseudo-random start; the larger Rayleigh quotient
    wins, which guards against a start orthogonal to the top eigenvector.
    """
    op = _as_operator(M)
    sigma = op.shift
    if sigma == 0.0:
        return 0.0
    rho1, _ = _power(op, np.ones(op.n), sigma, rtol)
    probe = np.random.default_rng(20_170_531).standard_normal(op.n)
    rho2, _ = _power(op, probe, sigma, rtol)
    return max(rho1, rho2)


@dataclass(frozen=True)
class SpectralBounds:
    m: int
    lambda_qz_max: float
    lambda_q_max: float
    c_thm1: float
    c_thm3: float
    c_grad: float
    c_eq38: float | None = None

    def to_dict(self, digits=12):
        out = {}
        for k, v in asdict(self).items():
            if isinstance(v, float):
                v = float(f"{v:.{digits}g}")
            out[k] = v
        return out


def _shifted_ops(obj):
    """Operators for ``Q`` and ``Q_z`` with row-sum shifts."""
    if hasattr(obj, "spectral_operators"):
        return obj.spectral_operators()
    Q = np.asarray(obj.Q)
    Q_d = np.zeros_like(Q)
    for i in range(obj.partition.m):
        b = obj.partition.block(i)
        Q_d[b, b] = Q[b, b]
    return _as_operator(Q), _as_operator(Q - Q_d)


def compute_bounds(obj, L=None):
    """Eigenvalue bounds and the four regularization thresholds of ``obj``.

    ``c_thm1 = lambda_max(Q_z)`` guarantees convergence of the iterates,
    ``c_thm3 = (m-1)/(2m-1) * 2 lambda_max(Q_z)`` convergence in value,
    ``c_eq38 = (m-1)/(2m-1) * sqrt(m) L`` the same for a smooth objective
    with gradient Lipschitz constant ``L``, and ``c_grad = lambda_max(Q)`` is
    the scaled projected gradient threshold.
    """
    if L is not None and not L > 0:
        raise InvalidArgumentError("L must be positive")
    m = obj.partition.m
    op_q, op_qz = _shifted_ops(obj)
    lam_qz = lambda_max_sym(op_qz)
    lam_q = lambda_max_sym(op_q)
    ratio = (m - 1) / (2 * m - 1)
    return SpectralBounds(
        m=m,
        lambda_qz_max=lam_qz,
        lambda_q_max=lam_q,
        c_thm1=lam_qz,
        c_thm3=ratio * 2.0 * lam_qz,
        c_grad=lam_q,
        c_eq38=None if L is None else ratio * np.sqrt(m) * float(L),
    )


def threshold(bounds, policy):
    if policy == "thm1":
        return bounds.c_thm1
    if policy == "thm3":
        return bounds.c_thm3
    if policy == "grad":
        return bounds.c_grad
    if policy == "eq38":
        if bounds.c_eq38 is None:
            raise InvalidArgumentError("eq38 policy needs a Lipschitz constant")
        return bounds.c_eq38
    raise InvalidArgumentError(f"unknown c policy {policy!r}")


def pick_c(bounds, policy="thm1", margin=0.01, manual=None):
    """Regularization coefficient ``(1 + margin) * threshold``.

    A zero threshold (one agent, or uncoupled blocks) gives ``margin``
    itself.  ``policy="manual"`` returns ``manual`` unchanged.
    """
    if policy == "manual":
        if manual is None or not manual >= 0:
            raise InvalidArgumentError("manual policy needs a nonnegative value")
        return float(manual)
    if not margin > 0:
        raise InvalidArgumentError("margin must be positive")
    t = threshold(bounds, policy)
    if t <= 0:
        return float(margin)
    return (1.0 + margin) * t
