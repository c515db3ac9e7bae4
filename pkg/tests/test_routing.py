"""
Tests für das dynamische Routing und die Squashing-Funktion
"""

import os
import sys
import unittest

import numpy as np
from hypothesis import given, settings, strategies as st

# Füge Projektverzeichnis zum Pfad hinzu
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from core.routing import SQUASH_EPSILON, VoteSet, dynamic_routing, squash
from core.tensor import Tensor, reduce_sum
from tests.oracles import routing_oracle
from utils.errors import ContractError, DimensionError

# Zufällige Routing-Probleme: (M, N, K, T, seed)
routing_problems = st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(1, 4),
                             st.integers(0, 2 ** 31 - 1))


def random_votes(m, n, k, seed, spread=2.0):
    return np.random.default_rng(seed).normal(scale=spread, size=(m, n, k))


class TestSquash(unittest.TestCase):
    """
    Tests für die Squashing-Nichtlinearität
    """

    def test_known_values(self):
        np.testing.assert_allclose(squash(Tensor([[2.0, 0.0]])).data, [[0.8, 0.0]], atol=1e-12)
        self.assertAlmostEqual(squash(Tensor([1.0, 0.0])).data[0], 0.5 / (1.0 + SQUASH_EPSILON), places=15)

    def test_long_vector_approaches_unit_length(self):
        out = squash(Tensor([100.0, 0.0])).data
        self.assertAlmostEqual(out[0], 10000.0 / 10001.0, places=12)
        self.assertAlmostEqual(out[0], 0.99990001, places=8)
        self.assertEqual(out[1], 0.0)
        self.assertLess(np.linalg.norm(out), 1.0)

    def test_zero_vector_stays_zero(self):
        np.testing.assert_array_equal(squash(Tensor(np.zeros(3))).data, np.zeros(3))

    def test_preserves_direction(self):
        s = np.array([3.0, -4.0])
        out = squash(Tensor(s)).data
        np.testing.assert_allclose(out / np.linalg.norm(out), s / 5.0, atol=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8))
    def test_norm_below_one(self, values):
        out = squash(Tensor(np.array(values))).data
        self.assertLess(np.linalg.norm(out), 1.0)


class TestDynamicRouting(unittest.TestCase):
    """
    Tests für das Routing gegen handgerechnete Fälle und das skalare Orakel
    """

    def test_single_vote(self):
        result = dynamic_routing(VoteSet(Tensor([[[2.0, 0.0]]]), 3))
        np.testing.assert_allclose(result.omega.data, [[0.8, 0.0]], atol=1e-12)
        np.testing.assert_array_equal(result.coupling.data, [[1.0]])
        # B wächst pro Iteration um Omega . V = 1.6
        np.testing.assert_allclose(result.logits.data, [[4.8]], atol=1e-12)

    def test_identical_votes_give_uniform_coupling(self):
        votes = np.tile(np.array([1.0, 2.0]), (3, 4, 1))
        result = dynamic_routing(VoteSet(Tensor(votes), 3))
        np.testing.assert_allclose(result.coupling.data, np.full((3, 4), 0.25), atol=1e-12)

    def test_agreeing_inputs_pull_coupling(self):
        # Eingabe 0 stimmt mit Ausgabe 0 überein, Eingabe 1 mit Ausgabe 1
        votes = np.array([[[3.0, 0.0], [0.0, 0.1]],
                          [[0.1, 0.0], [0.0, 3.0]]])
        result = dynamic_routing(VoteSet(Tensor(votes), 3))
        self.assertGreater(result.coupling.data[0, 0], 0.5)
        self.assertGreater(result.coupling.data[1, 1], 0.5)

    def test_two_clusters_strengthen_own_coupling(self):
        # Eingabe 0 gehört zu Ausgabe 0 (Achse x), Eingabe 1 zu Ausgabe 1 (Achse y), symmetrisch
        votes = np.array([[[2.0, 0.0], [0.0, 0.5]],
                          [[0.5, 0.0], [0.0, 2.0]]])
        result = dynamic_routing(VoteSet(Tensor(votes), 3))
        own = [0, 1]
        history = np.array([coupling[[0, 1], own] for coupling in result.coupling_history])
        self.assertEqual(history.shape, (3, 2))
        np.testing.assert_array_equal(history[0], [0.5, 0.5])
        self.assertTrue(np.all(np.diff(history, axis=0) >= 0.0))
        self.assertTrue(np.all(history[-1] > 1.0 / votes.shape[1]))
        np.testing.assert_allclose(history[:, 0], history[:, 1], atol=1e-15)

        omega, coupling, logits = routing_oracle(votes.tolist(), 3)
        np.testing.assert_allclose(result.omega.data, omega, atol=1e-10)
        np.testing.assert_allclose(result.coupling.data, coupling, atol=1e-10)
        np.testing.assert_allclose(result.logits.data, logits, atol=1e-10)

    def test_first_iteration_is_uniform(self):
        result = dynamic_routing(VoteSet(Tensor(random_votes(3, 4, 2, 0)), 2))
        np.testing.assert_array_equal(result.coupling_history[0], np.full((3, 4), 0.25))
        self.assertEqual(len(result.coupling_history), 2)

    def test_matches_oracle(self):
        for seed, (m, n, k, t) in enumerate([(1, 1, 1, 1), (2, 3, 4, 3), (5, 2, 3, 4), (4, 4, 4, 1)]):
            votes = random_votes(m, n, k, seed)
            result = dynamic_routing(VoteSet(Tensor(votes), t))
            omega, coupling, logits = routing_oracle(votes.tolist(), t)
            np.testing.assert_allclose(result.omega.data, omega, atol=1e-10)
            np.testing.assert_allclose(result.coupling.data, coupling, atol=1e-10)
            np.testing.assert_allclose(result.logits.data, logits, atol=1e-10)

    def test_input_mask_matches_oracle(self):
        votes = random_votes(4, 3, 2, 9)
        active = [True, False, True, False]
        result = dynamic_routing(VoteSet(Tensor(votes), 3), input_mask=np.array(active))
        omega, _, logits = routing_oracle(votes.tolist(), 3, active=active)
        np.testing.assert_allclose(result.omega.data, omega, atol=1e-10)
        np.testing.assert_allclose(result.logits.data, logits, atol=1e-10)

    def test_masked_inputs_equal_removed_inputs(self):
        votes = random_votes(4, 3, 2, 4)
        masked = dynamic_routing(VoteSet(Tensor(votes), 3), input_mask=np.array([True, True, False, False]))
        removed = dynamic_routing(VoteSet(Tensor(votes[:2]), 3))
        np.testing.assert_allclose(masked.omega.data, removed.omega.data, atol=1e-12)

    def test_masked_outputs_are_empty(self):
        votes = random_votes(3, 4, 2, 5)
        masked = dynamic_routing(VoteSet(Tensor(votes), 3), output_mask=np.array([True, False, True, False]))
        removed = dynamic_routing(VoteSet(Tensor(votes[:, [0, 2]]), 3))
        np.testing.assert_array_equal(masked.coupling.data[:, [1, 3]], 0.0)
        np.testing.assert_array_equal(masked.omega.data[[1, 3]], 0.0)
        np.testing.assert_allclose(masked.omega.data[[0, 2]], removed.omega.data, atol=1e-12)

    def test_leading_axes_are_independent(self):
        votes = random_votes(6, 3, 2, 6).reshape(2, 3, 3, 2)
        batched = dynamic_routing(VoteSet(Tensor(votes), 3))
        for i in range(2):
            single = dynamic_routing(VoteSet(Tensor(votes[i]), 3))
            np.testing.assert_allclose(batched.omega.data[i], single.omega.data, atol=1e-12)

    def test_detached_coupling_keeps_forward(self):
        votes = random_votes(2, 3, 2, 8)
        weights = np.random.default_rng(1).normal(size=(3, 2))
        grads = []
        for detach in (False, True):
            leaf = Tensor(votes, requires_grad=True)
            result = dynamic_routing(VoteSet(leaf, 3), detach_coupling=detach)
            reduce_sum(result.omega * weights).backward()
            grads.append((result.omega.data, leaf.grad))
        np.testing.assert_array_equal(grads[0][0], grads[1][0])
        self.assertFalse(np.allclose(grads[0][1], grads[1][1]))

    def test_invalid_inputs(self):
        with self.assertRaises(ContractError):
            dynamic_routing(VoteSet(Tensor(np.ones((1, 1, 2))), 0))
        with self.assertRaises(ContractError):
            dynamic_routing(VoteSet(Tensor(np.array([[[np.nan, 0.0]]])), 1))
        with self.assertRaises(DimensionError):
            dynamic_routing(VoteSet(Tensor(np.ones((2, 2))), 1))


class TestRoutingProperties(unittest.TestCase):
    """
    Eigenschaftsbasierte Tests über zufällige M, N, K und T
    """

    @settings(max_examples=60, deadline=None)
    @given(routing_problems)
    def test_coupling_rows_sum_to_one(self, problem):
        m, n, k, t, seed = problem
        result = dynamic_routing(VoteSet(Tensor(random_votes(m, n, k, seed)), t))
        np.testing.assert_allclose(result.coupling.data.sum(axis=-1), 1.0, atol=1e-12)
        self.assertTrue(np.all(result.coupling.data >= 0.0))

    @settings(max_examples=60, deadline=None)
    @given(routing_problems)
    def test_output_norms_below_one(self, problem):
        m, n, k, t, seed = problem
        result = dynamic_routing(VoteSet(Tensor(random_votes(m, n, k, seed)), t))
        self.assertTrue(np.all(np.linalg.norm(result.omega.data, axis=-1) < 1.0))

    @settings(max_examples=40, deadline=None)
    @given(routing_problems, st.randoms(use_true_random=False))
    def test_input_permutation_invariance(self, problem, random):
        m, n, k, t, seed = problem
        votes = random_votes(m, n, k, seed)
        order = list(range(m))
        random.shuffle(order)
        first = dynamic_routing(VoteSet(Tensor(votes), t))
        second = dynamic_routing(VoteSet(Tensor(votes[order]), t))
        np.testing.assert_allclose(first.omega.data, second.omega.data, atol=1e-12)
        np.testing.assert_allclose(first.logits.data[order], second.logits.data, atol=1e-10)

    @settings(max_examples=40, deadline=None)
    @given(routing_problems, st.randoms(use_true_random=False))
    def test_output_permutation_equivariance(self, problem, random):
        m, n, k, t, seed = problem
        votes = random_votes(m, n, k, seed)
        order = list(range(n))
        random.shuffle(order)
        first = dynamic_routing(VoteSet(Tensor(votes), t))
        second = dynamic_routing(VoteSet(Tensor(votes[:, order]), t))
        np.testing.assert_allclose(first.omega.data[order], second.omega.data, atol=1e-12)
        np.testing.assert_allclose(first.coupling.data[:, order], second.coupling.data, atol=1e-12)


if __name__ == "__main__":
    unittest.main()
