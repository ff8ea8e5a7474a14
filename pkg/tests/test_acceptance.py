"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v`` (the summary lines are
printed even when output capture is on).
"""

import time

import numpy as np
import pytest

from regjacobi.diagnostics import (check_descent, check_firm_nonexpansive, check_lipschitz_stacked,
                                   equivalence_report, random_instance, regression_set,
                                   solve_centralized)
from regjacobi.ev import (aggregate_jacobi_step, assemble_ev, fleet_scenario, initial_charging,
                          iterations_table, run_ev)
from regjacobi.iteration import (IterationConfig, fixed_point_residual, gradient_step, jacobi_step,
                                 jacobi_step_projection, run, trace_to_csv)
from regjacobi.problem import BlockPartition, QuadraticObjective, log_sum_exp_objective
from regjacobi.sets import Box, sample_point
from regjacobi.spectral import compute_bounds, pick_c

REGRESSION = regression_set()


@pytest.fixture
def verdict(capsys):
    def emit(number, name, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number:>2} {name}: {detail}")
        assert ok, detail
    return emit


def _sample(sets, rng):
    return np.concatenate([sample_point(s, rng) for s in sets])


def test_criterion_01_spectral_reproduction(verdict):
    t0 = time.perf_counter()
    obj, _ = assemble_ev(fleet_scenario(m=100, horizon=25, price=0.15))
    b = compute_bounds(obj)
    elapsed = time.perf_counter() - t0
    expected_thm3 = 99 / 199 * 2 * 0.1485
    ok = (abs(b.lambda_qz_max - 0.1485) <= 1e-6 and abs(b.c_thm3 - expected_thm3) <= 1e-9
          and round(b.c_thm3, 4) == 0.1478 and elapsed < 5.0)
    verdict(1, "spectral reproduction", ok,
            f"lambda_qz_max={b.lambda_qz_max:.10f} c_thm3={b.c_thm3:.10f} time={elapsed:.2f}s")


def test_criterion_02_table_one(verdict):
    t0 = time.perf_counter()
    worst = 0.0
    for m in (2, 5, 10, 100):
        cases = [(np.ones((m, m)), m - 1, m), (np.ones((m, m)) + m * np.eye(m), m - 1, 2 * m),
                 (m * np.eye(m), 0, m)]
        for Q, qz, qq in cases:
            b = compute_bounds(QuadraticObjective(Q, np.zeros(m), BlockPartition.uniform(m)))
            worst = max(worst, abs(b.lambda_qz_max - qz), abs(b.lambda_q_max - qq))
    elapsed = time.perf_counter() - t0
    verdict(2, "Table I closed forms", worst <= 1e-9 and elapsed < 10.0,
            f"max error={worst:.2e} time={elapsed:.2f}s")


def test_criterion_03_jacobi_convergence(verdict):
    worst_res, worst_gap, worst_k, failures = 0.0, 0.0, 0, 0
    for obj, sets in REGRESSION:
        c = 1.01 * compute_bounds(obj).lambda_qz_max + 1e-6
        trace = run(obj, sets, IterationConfig(c=c, max_iter=10_000, tol_step=1e-10))
        _, f_star = solve_centralized(obj, sets)
        res = fixed_point_residual(obj, sets, trace.x, c)
        gap = abs(obj.value(trace.x) - f_star) / (1 + abs(f_star))
        failures += not (trace.iterations <= 10_000 and res <= 1e-7 and gap <= 1e-6)
        worst_res, worst_gap = max(worst_res, res), max(worst_gap, gap)
        worst_k = max(worst_k, trace.iterations)
    verdict(3, "Jacobi convergence above lambda_max(Q_z)", failures == 0,
            f"{len(REGRESSION)} instances, max residual={worst_res:.2e}, max rel gap={worst_gap:.2e}, "
            f"max iterations={worst_k}")


def test_criterion_04_firm_nonexpansive(verdict):
    worst = -np.inf
    for k, (obj, sets) in enumerate(REGRESSION):
        c = 1.01 * compute_bounds(obj).lambda_qz_max + 1e-6
        rep = check_firm_nonexpansive(obj, sets, c, n_pairs=1000, seed=k)
        worst = max(worst, rep.max_violation)
    verdict(4, "firm nonexpansiveness", worst <= 1e-9,
            f"{len(REGRESSION)}x1000 pairs, max violation={worst:.2e}")


def test_criterion_05_descent(verdict):
    worst33, worst55 = -np.inf, -np.inf
    table = QuadraticObjective(np.ones((5, 5)) + 5 * np.eye(5), np.linspace(-2, 2, 5),
                               BlockPartition.uniform(5))
    instances = REGRESSION + [(table, [Box([-1.0], [1.0])] * 5)]
    for obj, sets in instances:
        b = compute_bounds(obj)
        c = 1.01 * b.lambda_q_max
        trace = run(obj, sets, IterationConfig(c=c, method="gradient"))
        rep = check_descent(trace, "eq33", {"c": c, "lambda_q_max": b.lambda_q_max})
        worst33 = max(worst33, rep.max_violation)
        c = pick_c(b, "thm3")
        trace = run(obj, sets, IterationConfig(c=c))
        rep = check_descent(trace, "eq55", {"c": c, "m": obj.m, "lambda_qz_max": b.lambda_qz_max})
        worst55 = max(worst55, rep.max_violation)
    ok = worst33 <= 1e-9 and worst55 <= 1e-9
    verdict(5, "descent inequalities", ok,
            f"gradient max violation={worst33:.2e}, Jacobi max violation={worst55:.2e}")


def test_criterion_06_lipschitz(verdict):
    worst_q = -np.inf
    for k, (obj, sets) in enumerate(REGRESSION):
        rep = check_lipschitz_stacked(obj, sets, n_triples=1000, seed=k, bound="coupling")
        worst_q = max(worst_q, rep.max_violation)
    rng = np.random.default_rng(2017)
    lse = log_sum_exp_objective(rng.normal(size=(6, 5)), 0.5, BlockPartition((2, 1, 2)))
    sets = [Box([-1, -1], [1, 1]), Box([-1], [1]), Box([-1, -1], [1, 1])]
    rep = check_lipschitz_stacked(lse, sets, n_triples=1000, bound="lipschitz")
    ok = worst_q <= 1e-9 and rep.passed
    verdict(6, "stacked-gradient Lipschitz bounds", ok,
            f"quadratic max violation={worst_q:.2e}, log-sum-exp max violation={rep.max_violation:.2e}")


def test_criterion_07_fixed_points_are_minimizers(verdict):
    failures, singular = [], 0
    for k, (obj, sets) in enumerate(REGRESSION):
        singular += np.linalg.matrix_rank(obj.Q) < obj.n
        c = 1.01 * compute_bounds(obj).lambda_qz_max + 1e-6
        rep = equivalence_report(obj, sets, c, n_points=20, seed=k)
        if not rep.passed:
            failures.append(k)
    verdict(7, "fixed points and minimizers", not failures and singular > 0,
            f"{len(REGRESSION)} instances ({singular} with singular Q), failing={failures}")


def test_criterion_08_ev_trend(verdict):
    t0 = time.perf_counter()
    scenario = fleet_scenario(m=100)
    obj, sets = assemble_ev(scenario)
    thr = compute_bounds(obj).c_thm3
    _, f_star = solve_centralized(obj, sets)
    rows = iterations_table(scenario, [1.0 * thr, 1.35 * thr, 2.7 * thr], f_star, max_iter=10_000)
    counts = [k for _, k, _ in rows]
    zero = run_ev(scenario, IterationConfig(c=0.0, max_iter=10_000))
    elapsed = time.perf_counter() - t0
    finite = all(k is not None for k in counts)
    ok = (finite and counts == sorted(counts) and not zero.converged and zero.iterations == 10_000
          and elapsed < 120.0)
    verdict(8, "EV iteration-count trend", ok,
            f"f*={f_star:.6f} counts at (1.0, 1.35, 2.7) x {thr:.6f} = {counts}; "
            f"c=0 converged={zero.converged} after {zero.iterations}; time={elapsed:.1f}s")


def test_criterion_09_ev_scale(verdict):
    big = fleet_scenario(m=1000, gamma_range=(0.005, 0.025), rate_upper=0.0025)
    obj, sets = assemble_ev(big)
    c = pick_c(compute_bounds(obj), "thm3")
    _, f_star = solve_centralized(obj, sets)
    trace = run_ev(big, IterationConfig(c=c, max_iter=200, tol_step=1e-14))
    k = trace.iterations_to(f_star, 1e-6)

    small = fleet_scenario(m=50, seed=11)
    dense, dsets = assemble_ev(small, "dense")
    c50 = pick_c(compute_bounds(dense), "thm3")
    x = initial_charging(small).reshape(-1)
    X = x.reshape(small.m, small.horizon)
    diff = 0.0
    for _ in range(30):
        x = jacobi_step(dense, dsets, x, c50)
        X, _ = aggregate_jacobi_step(small, X, small.d + X.sum(axis=0), c50)
        diff = max(diff, float(np.abs(X.reshape(-1) - x).max()))
    ok = k is not None and k <= 200 and diff <= 1e-8
    verdict(9, "EV scale and aggregate form", ok,
            f"m=1000 reaches relative 1e-6 at k={k} (f*={f_star:.6f}); m=50 max dense/aggregate diff={diff:.2e}")


def test_criterion_10_jacobi_forms(verdict):
    worst_proj = 0.0
    for seed in range(200):
        obj, sets = random_instance(1000 + seed)
        rng = np.random.default_rng(seed)
        c = 1.01 * compute_bounds(obj).lambda_qz_max + 1e-6
        x = _sample(sets, rng)
        d = np.abs(jacobi_step(obj, sets, x, c) - jacobi_step_projection(obj, sets, x, c)).max()
        worst_proj = max(worst_proj, float(d))
    worst_diag = 0.0
    for seed in range(50):
        obj, sets = random_instance(2000 + seed)
        rng = np.random.default_rng(seed)
        D = QuadraticObjective(np.diag(rng.uniform(0.1, 2.0, obj.n)), obj.q, obj.partition)
        x = _sample(sets, rng)
        c = rng.uniform(0.05, 3.0)
        worst_diag = max(worst_diag, float(np.abs(jacobi_step(D, sets, x, c) - gradient_step(D, sets, x, c)).max()))
    ok = worst_proj <= 1e-8 and worst_diag <= 1e-10
    verdict(10, "equivalent Jacobi forms", ok,
            f"projection form max diff={worst_proj:.2e} (200 instances), "
            f"diagonal Jacobi/gradient max diff={worst_diag:.2e}")


def test_criterion_11_determinism(verdict):
    obj, sets = REGRESSION[7]
    cfg = IterationConfig(c=pick_c(compute_bounds(obj), "thm1"))
    a = trace_to_csv(run(obj, sets, cfg))
    b = trace_to_csv(run(obj, sets, cfg))
    scenario = fleet_scenario(m=100, seed=5)
    ev_cfg = IterationConfig(c=0.15, max_iter=100)
    e1 = trace_to_csv(run_ev(scenario, ev_cfg))
    e2 = trace_to_csv(run_ev(fleet_scenario(m=100, seed=5), ev_cfg))
    verdict(11, "deterministic traces", a == b and e1 == e2,
            f"solver trace {len(a)} bytes identical={a == b}; EV trace {len(e1)} bytes identical={e1 == e2}")
