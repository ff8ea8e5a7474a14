import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import quad
from regjacobi.diagnostics import random_instance
from regjacobi.errors import InvalidArgumentError
from regjacobi.problem import (BlockPartition, QuadraticObjective, block_decompose, eval_quadratic,
                               grad_quadratic, load_problem, local_value, log_sum_exp_objective,
                               problem_from_dict, problem_to_dict, save_problem, stacked_gradient,
                               sum_local_values)
from regjacobi.sets import Box, BudgetBox


class TestBlockPartition:
    def test_offsets_and_blocks(self):
        p = BlockPartition((2, 1, 3))
        assert p.m == 3 and p.n == 6
        assert p.offsets == (0, 2, 3)
        assert p.block(2) == slice(3, 6)

    def test_rejects_empty_blocks(self):
        with pytest.raises(InvalidArgumentError):
            BlockPartition((2, 0))
        with pytest.raises(InvalidArgumentError):
            BlockPartition(())

    @given(st.lists(st.integers(1, 5), min_size=1, max_size=8))
    def test_offsets_strictly_increasing(self, sizes):
        p = BlockPartition(tuple(sizes))
        assert p.n == sum(sizes)
        assert all(a < b for a, b in zip(p.offsets, p.offsets[1:]))
        x = np.arange(p.n, dtype=float)
        np.testing.assert_array_equal(np.concatenate(p.split(x)), x)


class TestQuadraticObjective:
    @pytest.mark.parametrize("x, expected", [((1, 1), -2.0), ((0, 0), 0.0)])
    def test_value_identity(self, x, expected):
        obj = quad(np.eye(2), [-2, -2])
        assert eval_quadratic(obj, np.array(x, dtype=float)) == expected

    def test_value_hand_expansion(self):
        obj = quad([[2, 1], [1, 3]], [0, 0])
        assert eval_quadratic(obj, np.ones(2)) == 7.0

    @pytest.mark.parametrize("Q, q, x, expected", [
        (np.eye(2), [-2, -2], [1, 1], [0, 0]),
        (np.eye(2), [-2, -2], [0, 0], [-2, -2]),
        ([[2, 1], [1, 3]], [1, 0], [1, 0], [5, 2]),
    ])
    def test_gradient(self, Q, q, x, expected):
        np.testing.assert_array_equal(grad_quadratic(quad(Q, q), np.array(x, float)), expected)

    def test_dimension_mismatch(self):
        obj = quad(np.eye(2), [0, 0])
        with pytest.raises(InvalidArgumentError):
            obj.value(np.ones(3))
        with pytest.raises(InvalidArgumentError):
            obj.gradient(np.ones(1))

    def test_symmetrizes_with_warning(self):
        with pytest.warns(UserWarning):
            obj = quad([[1.0, 0.2], [0.0, 1.0]], [0, 0])
        np.testing.assert_array_equal(obj.Q, [[1.0, 0.1], [0.1, 1.0]])

    def test_roundoff_asymmetry_is_silent(self):
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            quad([[1.0, 0.5], [0.5 + 1e-16, 1.0]], [0, 0])

    def test_rejects_indefinite(self):
        with pytest.raises(InvalidArgumentError):
            quad([[1, 2], [2, 1]], [0, 0])

    def test_strict_requires_definite(self):
        Q = np.ones((2, 2))
        quad(Q, [0, 0])
        with pytest.raises(InvalidArgumentError):
            QuadraticObjective(Q, [0, 0], BlockPartition((1, 1)), strict=True)

    def test_arrays_are_readonly(self):
        obj = quad(np.eye(2), [0, 0])
        with pytest.raises(ValueError):
            obj.Q[0, 0] = 5.0

    def test_const_shifts_value_only(self):
        obj = QuadraticObjective(np.eye(2), [1, 1], BlockPartition((1, 1)), const=3.0)
        x = np.array([0.5, -1.0])
        assert obj.value(x) == pytest.approx(x @ x + x.sum() + 3.0)
        np.testing.assert_array_equal(obj.gradient(x), 2 * x + 1)


class TestBlockDecompose:
    def test_diagonal_q_has_no_coupling(self):
        d = block_decompose(quad(np.diag([1.0, 2.0, 3.0]), np.zeros(3), sizes=(2, 1)))
        np.testing.assert_array_equal(d.Q_z, 0)

    def test_two_by_two(self):
        d = block_decompose(quad([[2, 1], [1, 3]], [0, 0]))
        np.testing.assert_array_equal(d.Q_d, np.diag([2.0, 3.0]))
        np.testing.assert_array_equal(d.Q_z, [[0, 1], [1, 0]])

    def test_all_ones(self):
        d = block_decompose(quad(np.ones((3, 3)), np.zeros(3)))
        np.testing.assert_array_equal(d.Q_z, np.ones((3, 3)) - np.eye(3))

    @pytest.mark.parametrize("seed", range(10))
    def test_invariants(self, seed):
        obj, _ = random_instance(seed)
        d = block_decompose(obj)
        np.testing.assert_array_equal(d.Q_d + d.Q_z, obj.Q)
        np.testing.assert_array_equal(d.Q_z, d.Q_z.T)
        assert np.trace(d.Q_z) == 0.0
        for i in range(obj.m):
            b = obj.partition.block(i)
            np.testing.assert_array_equal(d.Q_z[b, b], 0)
        again = block_decompose(QuadraticObjective(d.Q_d, obj.q, obj.partition))
        np.testing.assert_array_equal(again.Q_d, d.Q_d)
        np.testing.assert_array_equal(again.Q_z, 0)

    @pytest.mark.parametrize("seed", range(5))
    def test_operator_protocol_matches_matrices(self, seed):
        obj, _ = random_instance(seed)
        d = block_decompose(obj)
        x = np.random.default_rng(seed).normal(size=obj.n)
        np.testing.assert_allclose(obj.offdiag_matvec(x), d.Q_z @ x, atol=1e-13)
        np.testing.assert_allclose(obj.blockdiag_matvec(x), d.Q_d @ x, atol=1e-13)


class TestStackedGradient:
    def test_hand_example(self):
        obj = quad([[2, 1], [1, 3]], [0, 0])
        np.testing.assert_array_equal(stacked_gradient(obj, np.ones(2), np.array([0.0, 2.0])), [8, 6])

    def test_uncoupled_ignores_x(self):
        obj = quad(np.diag([1.0, 2.0]), [1.0, -1.0])
        z = np.array([0.3, 0.7])
        g1 = stacked_gradient(obj, z, np.zeros(2))
        g2 = stacked_gradient(obj, z, np.array([5.0, -4.0]))
        np.testing.assert_array_equal(g1, g2)
        np.testing.assert_allclose(g1, 2 * np.diag([1.0, 2.0]) @ z + [1.0, -1.0])

    @pytest.mark.parametrize("seed", range(10))
    def test_diagonal_argument_gives_gradient(self, seed):
        obj, _ = random_instance(seed)
        x = np.random.default_rng(seed).normal(size=obj.n)
        g = obj.gradient(x)
        np.testing.assert_allclose(stacked_gradient(obj, x, x), g, rtol=1e-12, atol=1e-12 * np.abs(g).max())

    @pytest.mark.parametrize("seed", range(5))
    def test_generic_path_matches_quadratic_formula(self, seed):
        obj, _ = random_instance(seed)
        rng = np.random.default_rng(seed)
        z, x = rng.normal(size=(2, obj.n))

        class Wrapped:
            partition = obj.partition
            value = staticmethod(obj.value)
            gradient = staticmethod(obj.gradient)

        np.testing.assert_allclose(stacked_gradient(Wrapped, z, x), stacked_gradient(obj, z, x),
                                   rtol=1e-10, atol=1e-12)


class TestLocalSums:
    @pytest.mark.parametrize("seed", range(8))
    def test_sum_of_local_values_at_x(self, seed):
        obj, _ = random_instance(seed)
        x = np.random.default_rng(seed).normal(size=obj.n)
        # every term equals f(x), so the exact sum is m f(x) up to one rounding
        assert sum_local_values(obj, x, x) == math.fsum([obj.value(x)] * obj.m)

    @pytest.mark.parametrize("seed", range(8))
    def test_x_side_gradient_is_m_minus_one_gradients(self, seed):
        # d/dx of sum_i f(z^i, x^{-i}) at z = x equals (m - 1) grad f(x)
        obj, _ = random_instance(seed)
        p = obj.partition
        x = np.random.default_rng(seed).normal(size=obj.n)
        J = np.zeros(obj.n)
        for i in range(p.m):
            mask = np.ones(obj.n)
            mask[p.block(i)] = 0.0
            J += mask * obj.gradient(x)
        np.testing.assert_allclose(J, (p.m - 1) * obj.gradient(x), atol=1e-12)

    def test_local_value_replaces_one_block(self):
        obj = quad(np.eye(3), np.zeros(3), sizes=(2, 1))
        x = np.array([1.0, 2.0, 3.0])
        assert local_value(obj, 1, np.array([0.0]), x) == 5.0


class TestSmoothObjective:
    def setup_method(self):
        rng = np.random.default_rng(7)
        self.A = rng.normal(size=(4, 5))
        self.obj = log_sum_exp_objective(self.A, 0.5, BlockPartition((2, 3)))

    def test_gradient_matches_central_differences(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            x = rng.uniform(-1, 1, 5)
            g = self.obj.gradient(x)
            h = 1e-6
            fd = np.array([(self.obj.value(x + h * e) - self.obj.value(x - h * e)) / (2 * h)
                           for e in np.eye(5)])
            np.testing.assert_allclose(fd, g, rtol=1e-5, atol=1e-8)

    def test_lipschitz_constant_holds(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            x, y = rng.uniform(-2, 2, (2, 5))
            lhs = np.linalg.norm(self.obj.gradient(x) - self.obj.gradient(y))
            assert lhs <= self.obj.lipschitz_L * np.linalg.norm(x - y) * (1 + 1e-12)

    def test_stacked_gradient_diagonal_identity(self):
        x = np.linspace(-1, 1, 5)
        np.testing.assert_allclose(stacked_gradient(self.obj, x, x), self.obj.gradient(x), rtol=1e-8)

    def test_rejects_nonpositive_tau(self):
        with pytest.raises(InvalidArgumentError):
            log_sum_exp_objective(self.A, 0.0, BlockPartition((2, 3)))


class TestProblemFiles:
    def test_round_trip(self, tmp_path):
        obj = quad([[2, 1], [1, 3]], [0.1, -0.3])
        sets = [Box([0.0], [1.0]), BudgetBox([0.0], [1.0], 0.5)]
        path = tmp_path / "p.json"
        save_problem(path, obj, sets)
        obj2, sets2 = load_problem(path)
        np.testing.assert_array_equal(obj2.Q, obj.Q)
        np.testing.assert_array_equal(obj2.q, obj.q)
        assert sets2[1].gamma == 0.5

    def test_exact_decimal_serialization(self):
        q = [0.1, 1 / 3]
        d = json.loads(json.dumps(problem_to_dict(quad(np.eye(2), q))))
        obj, sets = problem_from_dict(d)
        assert sets is None
        assert obj.q.tolist() == q

    def test_missing_key(self):
        with pytest.raises(InvalidArgumentError):
            problem_from_dict({"n_i": [1], "Q": [[1.0]]})

    def test_set_count_mismatch(self):
        d = problem_to_dict(quad(np.eye(2), [0, 0]))
        d["sets"] = [{"type": "box", "lower": [0], "upper": [1]}]
        with pytest.raises(InvalidArgumentError):
            problem_from_dict(d)
