"""Problem data: block partitions, quadratic and smooth coupled objectives.

The objective couples ``m`` agents whose decision vectors are stacked into a
single vector ``x = (x^1, ..., x^m)``.  Quadratic objectives have the form
``f(x) = x'Qx + q'x`` and expose a small duck-typed protocol used by the
iteration engines:

``value``, ``gradient``, ``matvec`` (Qx), ``diag_block(i)`` (Q_ii),
``offdiag_matvec`` (Q_z x) and the attributes ``q``, ``partition``.

:class:`regjacobi.ev.KroneckerObjective` implements the same protocol without
materializing ``Q``.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from regjacobi.errors import InvalidArgumentError

SYMMETRY_RTOL = 1e-12
PSD_RTOL = 1e-8


@dataclass(frozen=True)
class BlockPartition:
    """Sizes of the agents' local decision vectors."""

    sizes: tuple[int, ...]

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.sizes)
        if not sizes:
            raise InvalidArgumentError("partition needs at least one block")
        if any(s < 1 for s in sizes):
            raise InvalidArgumentError(f"block sizes must be >= 1, got {sizes}")
        object.__setattr__(self, "sizes", sizes)

    @classmethod
    def uniform(cls, m, size=1):
        return cls((size,) * m)

    @property
    def m(self):
        return len(self.sizes)

    @property
    def n(self):
        return sum(self.sizes)

    @property
    def offsets(self):
        return tuple(int(o) for o in np.concatenate(([0], np.cumsum(self.sizes)[:-1])))

    def block(self, i):
        """Slice of block ``i`` in the stacked vector."""
        start = self.offsets[i]
        return slice(start, start + self.sizes[i])

    def split(self, x):
        return [x[self.block(i)] for i in range(self.m)]

    def check(self, x, name="x"):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n,):
            raise InvalidArgumentError(f"{name} must have shape ({self.n},), got {x.shape}")
        return x

    def is_uniform(self):
        return len(set(self.sizes)) == 1


def _readonly(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class QuadraticObjective:
    """Dense quadratic ``f(x) = x'Qx + q'x + const``.

    ``Q`` is symmetrized on construction (with a warning when the asymmetry
    exceeds round-off) and must be positive semidefinite; pass
    ``strict=True`` to require positive definiteness.  ``const`` only shifts
    reported objective values.
    """

    Q: np.ndarray
    q: np.ndarray
    partition: BlockPartition
    const: float = 0.0
    strict: bool = False

    def __post_init__(self):
        Q = np.array(self.Q, dtype=float)
        q = np.array(self.q, dtype=float)
        n = self.partition.n
        if Q.shape != (n, n):
            raise InvalidArgumentError(f"Q must be {n}x{n}, got {Q.shape}")
        if q.shape != (n,):
            raise InvalidArgumentError(f"q must have length {n}, got {q.shape}")
        if not (np.all(np.isfinite(Q)) and np.all(np.isfinite(q))):
            raise InvalidArgumentError("Q and q must be finite")
        asym = np.abs(Q - Q.T).max()
        if asym > SYMMETRY_RTOL * (1.0 + np.abs(Q).sum(axis=1).max()):
            warnings.warn(f"Q is not symmetric (max |Q - Q'| = {asym:.3g}); using (Q + Q')/2",
                          stacklevel=3)
        Q = 0.5 * (Q + Q.T)
        eig = np.linalg.eigvalsh(Q)
        if self.strict:
            if eig[0] <= 0:
                raise InvalidArgumentError(f"Q is not positive definite (min eig {eig[0]:.3g})")
        elif eig[0] < -PSD_RTOL * max(eig[-1], 0.0):
            raise InvalidArgumentError(f"Q is not positive semidefinite (min eig {eig[0]:.3g})")
        object.__setattr__(self, "Q", _readonly(Q))
        object.__setattr__(self, "q", _readonly(q))
        object.__setattr__(self, "const", float(self.const))

    @property
    def n(self):
        return self.partition.n

    @property
    def m(self):
        return self.partition.m

    def value(self, x):
        x = self.partition.check(x)
        return float(x @ (self.Q @ x) + self.q @ x) + self.const

    def gradient(self, x):
        x = self.partition.check(x)
        return 2.0 * (self.Q @ x) + self.q

    def matvec(self, x):
        return self.Q @ x

    def diag_block(self, i):
        b = self.partition.block(i)
        return np.array(self.Q[b, b])

    def blockdiag_matvec(self, x):
        out = np.empty(self.n)
        for i in range(self.m):
            b = self.partition.block(i)
            out[b] = self.Q[b, b] @ x[b]
        return out

    def offdiag_matvec(self, x):
        return self.Q @ x - self.blockdiag_matvec(x)


@dataclass(frozen=True)
class BlockDecomposition:
    """``Q = Q_d + Q_z`` with ``Q_d`` the block-diagonal part."""

    Q_d: np.ndarray
    Q_z: np.ndarray


@dataclass(frozen=True)
class SmoothObjective:
    """A general convex objective given by value and gradient callables.

    ``lipschitz_L`` is the Lipschitz constant of the gradient over the
    feasible set, as stated by the caller.
    """

    value_fn: Callable[[np.ndarray], float]
    grad_fn: Callable[[np.ndarray], np.ndarray]
    lipschitz_L: float
    partition: BlockPartition
    name: str = "smooth"

    def __post_init__(self):
        if not self.lipschitz_L > 0:
            raise InvalidArgumentError("lipschitz_L must be positive")

    @property
    def n(self):
        return self.partition.n

    @property
    def m(self):
        return self.partition.m

    def value(self, x):
        return float(self.value_fn(self.partition.check(x)))

    def gradient(self, x):
        return np.asarray(self.grad_fn(self.partition.check(x)), dtype=float)


def log_sum_exp_objective(A, tau, partition):
    """``f(x) = tau * log(sum_j exp(a_j'x / tau))`` with ``L = lambda_max(A'A) / tau``."""
    A = np.array(A, dtype=float)
    tau = float(tau)
    if tau <= 0:
        raise InvalidArgumentError("tau must be positive")
    if A.shape[1] != partition.n:
        raise InvalidArgumentError(f"A must have {partition.n} columns")

    def value(x):
        s = A @ x / tau
        top = s.max()
        return tau * (top + math.log(np.exp(s - top).sum()))

    def grad(x):
        s = A @ x / tau
        w = np.exp(s - s.max())
        return A.T @ (w / w.sum())

    L = float(np.linalg.eigvalsh(A.T @ A)[-1]) / tau
    return SmoothObjective(value, grad, L, partition, name="log_sum_exp")


def is_quadratic(obj):
    return hasattr(obj, "offdiag_matvec")


def eval_quadratic(obj, x):
    """``x'Qx + q'x`` (plus the objective's constant, zero unless set)."""
    return obj.value(x)


def grad_quadratic(obj, x):
    return obj.gradient(x)


def block_decompose(obj):
    Q = np.asarray(obj.Q)
    Q_d = np.zeros_like(Q)
    for i in range(obj.partition.m):
        b = obj.partition.block(i)
        Q_d[b, b] = Q[b, b]
    return BlockDecomposition(Q_d=Q_d, Q_z=Q - Q_d)


def replace_block(x, i, z_i, partition):
    w = np.array(x, dtype=float)
    w[partition.block(i)] = z_i
    return w


def local_value(obj, i, z_i, x):
    """``f(z^i, x^{-i})``: the objective with block ``i`` replaced by ``z_i``."""
    return obj.value(replace_block(x, i, z_i, obj.partition))


def sum_local_values(obj, z, x):
    """``sum_i f(z^i, x^{-i})``, summed exactly."""
    p = obj.partition
    z = p.check(z, "z")
    x = p.check(x)
    return math.fsum(local_value(obj, i, z[p.block(i)], x) for i in range(p.m))


def stacked_gradient(obj, z, x):
    """Stack of block gradients ``grad_i f(z^i, x^{-i})`` for ``i = 1..m``.

    This is the gradient of ``sum_i f(., x^{-i})`` evaluated at ``z``.  For
    quadratics it equals ``2 Q_d z + 2 Q_z x + q``.
    """
    p = obj.partition
    z = p.check(z, "z")
    x = p.check(x)
    if is_quadratic(obj):
        return 2.0 * (obj.matvec(z) - obj.offdiag_matvec(z)) + 2.0 * obj.offdiag_matvec(x) + obj.q
    out = np.empty(p.n)
    for i in range(p.m):
        b = p.block(i)
        out[b] = obj.gradient(replace_block(x, i, z[b], p))[b]
    return out


def problem_to_dict(obj, sets=None):
    from regjacobi.sets import set_to_dict

    d = {"n_i": list(obj.partition.sizes), "Q": obj.Q.tolist(), "q": obj.q.tolist()}
    if obj.const:
        d["const"] = obj.const
    if sets is not None:
        d["sets"] = [set_to_dict(s) for s in sets]
    return d


def problem_from_dict(d, strict=False):
    """Build ``(objective, sets)`` from the problem-file dictionary.

    ``sets`` is ``None`` when the file carries no ``"sets"`` entry.
    """
    from regjacobi.sets import set_from_dict

    try:
        partition = BlockPartition(tuple(d["n_i"]))
        obj = QuadraticObjective(d["Q"], d["q"], partition, const=d.get("const", 0.0), strict=strict)
    except KeyError as exc:
        raise InvalidArgumentError(f"problem file is missing key {exc}") from None
    sets = None
    if "sets" in d:
        sets = [set_from_dict(s) for s in d["sets"]]
        check_sets(partition, sets)
    return obj, sets


def check_sets(partition, sets: Sequence):
    if len(sets) != partition.m:
        raise InvalidArgumentError(f"expected {partition.m} sets, got {len(sets)}")
    for i, (s, size) in enumerate(zip(sets, partition.sizes)):
        if s.dim != size:
            raise InvalidArgumentError(f"set {i} has dimension {s.dim}, block has {size}")


def load_problem(path, strict=False):
    with open(path) as fh:
        return problem_from_dict(json.load(fh), strict=strict)


def save_problem(path, obj, sets=None):
    with open(path, "w") as fh:
        json.dump(problem_to_dict(obj, sets), fh)
