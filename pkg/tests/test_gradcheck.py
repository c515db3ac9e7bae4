"""
Gradientenprüfungen für Operationen, Routing und die Capsule-SAN-Schicht
"""

import os
import sys
import unittest

import numpy as np

# Füge Projektverzeichnis zum Pfad hinzu
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from core.attention import MultiHeadProjection, logits
from core.capsule_san import AcceptanceGate, CapsuleSelfAttention, capsule_san_forward, vertical_routing
from core.gradcheck import grad_check
from core.model import LayerNorm
from core.routing import VoteSet, dynamic_routing, squash
from core.tensor import (Tensor, concat, l2_norm, log, log_softmax, masked_fill, matmul, mean, reduce_sum, reshape,
                         softmax_last_axis, stack, transpose)
from utils.errors import ContractError, NumericError


def weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return reduce_sum(out * weights)


class TestGradCheckTool(unittest.TestCase):
    """
    Tests für das Werkzeug selbst
    """

    def test_linear_function_is_exact(self):
        # Ganzzahlige Daten und eine Zweierpotenz als Schrittweite machen die Differenzen exakt
        x = Tensor(np.arange(6.0).reshape(2, 3))
        report = grad_check(lambda t: reduce_sum(t), x, step=2.0 ** -16)
        self.assertEqual(report.max_rel_error, 0.0)
        self.assertTrue(report.passed)

    def test_quadratic_function(self):
        x = Tensor(np.random.default_rng(0).normal(size=(4,)))
        report = grad_check(lambda t: reduce_sum(t * t), x)
        self.assertTrue(report.passed)
        np.testing.assert_allclose(report.analytic[0], 2.0 * x.data)

    def test_non_scalar_function_is_rejected(self):
        with self.assertRaises(ContractError):
            grad_check(lambda t: t * 2.0, Tensor(np.ones(3)))

    def test_nan_is_reported(self):
        with np.errstate(invalid="ignore"):
            with self.assertRaises(NumericError):
                grad_check(lambda t: reduce_sum(log(t)), Tensor(np.array([-1.0, 2.0])))


class TestOperationGradients(unittest.TestCase):
    """
    Gradientenprüfung der einzelnen Operationen
    """

    def setUp(self):
        self.rng = np.random.default_rng(3)

    def test_softmax(self):
        weights = self.rng.normal(size=(3, 4))
        report = grad_check(lambda t: weighted_sum(softmax_last_axis(t), weights), Tensor(self.rng.normal(size=(3, 4))))
        self.assertTrue(report.passed, report.max_rel_error)

    def test_log_softmax(self):
        weights = self.rng.normal(size=(2, 5))
        report = grad_check(lambda t: weighted_sum(log_softmax(t), weights), Tensor(self.rng.normal(size=(2, 5))))
        self.assertTrue(report.passed, report.max_rel_error)

    def test_squash(self):
        weights = self.rng.normal(size=(3, 4))
        report = grad_check(lambda t: weighted_sum(squash(t), weights), Tensor(self.rng.normal(size=(3, 4))))
        self.assertTrue(report.passed, report.max_rel_error)

    def test_attention_logits(self):
        weights = self.rng.normal(size=(2, 3, 3))
        report = grad_check(lambda q, k: weighted_sum(logits(q, k).logits, weights),
                            [Tensor(self.rng.normal(size=(2, 3, 2))), Tensor(self.rng.normal(size=(2, 3, 2)))])
        self.assertTrue(report.passed, report.max_rel_error)


class TestRoutingGradients(unittest.TestCase):
    """
    Gradientenprüfung durch das Routing hindurch
    """

    def setUp(self):
        self.rng = np.random.default_rng(11)

    def test_dynamic_routing(self):
        weights = self.rng.normal(size=(3, 4))
        votes = Tensor(self.rng.normal(size=(2, 3, 4)))
        report = grad_check(lambda v: weighted_sum(dynamic_routing(VoteSet(v, 3)).omega, weights), votes)
        self.assertTrue(report.passed, report.max_rel_error)

    def test_vertical_routing_with_gate(self):
        gate = AcceptanceGate(2, np.random.default_rng(1))
        weights = self.rng.normal(size=(2, 3, 3))
        cube = logits(Tensor(self.rng.normal(size=(2, 3, 2))), Tensor(self.rng.normal(size=(2, 3, 2))))
        report = grad_check(lambda c: weighted_sum(vertical_routing(cube.with_logits(c), gate, 2).omega, weights),
                            cube.logits)
        self.assertTrue(report.passed, report.max_rel_error)

    def test_capsule_layer(self):
        # H=2, L=3, d=4, T=2 mit beiden Routing-Pfaden
        layer = CapsuleSelfAttention(4, 2, np.random.default_rng(5), vertical=True, horizontal=True, iterations=2,
                                     gate_rng=np.random.default_rng(6))
        weights = self.rng.normal(size=(3, 4))
        report = grad_check(lambda x: weighted_sum(capsule_san_forward(x, layer), weights),
                            Tensor(self.rng.normal(size=(3, 4))))
        self.assertTrue(report.passed, report.max_rel_error)

    def test_capsule_layer_causal(self):
        layer = CapsuleSelfAttention(4, 2, np.random.default_rng(5), horizontal=True, iterations=2)
        weights = self.rng.normal(size=(3, 4))
        report = grad_check(lambda x: weighted_sum(capsule_san_forward(x, layer, causal=True), weights),
                            Tensor(self.rng.normal(size=(3, 4))))
        self.assertTrue(report.passed, report.max_rel_error)

    def test_projection_weights(self):
        projection = MultiHeadProjection(4, 2, np.random.default_rng(2))
        layer = CapsuleSelfAttention(4, 2, np.random.default_rng(5), horizontal=True, iterations=2)
        x = Tensor(self.rng.normal(size=(3, 4)))
        weights = self.rng.normal(size=(3, 4))

        def f(w_o: Tensor) -> Tensor:
            layer.projection.w_o = w_o
            return weighted_sum(capsule_san_forward(x, layer), weights)

        report = grad_check(f, projection.w_o)
        self.assertTrue(report.passed, report.max_rel_error)


# ---------------------------------------------------------------------------
# Zufällige Gradientenprüfung aller Operationen
# ---------------------------------------------------------------------------

TRIALS = 100


def random_shape(rng, min_rank=1, max_rank=3):
    rank = int(rng.integers(min_rank, max_rank + 1))
    return tuple(int(extent) for extent in rng.integers(1, 6, size=rank))


def broadcast_partner(rng, shape):
    partner = [1 if rng.random() < 0.3 else extent for extent in shape]
    if len(partner) > 1 and rng.random() < 0.3:
        partner = partner[1:]
    return tuple(partner)


def away_from_zero(rng, shape, low=0.5, high=2.0):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(low, high, size=shape)


def projected(out, seed):
    return reduce_sum(out * np.random.default_rng(seed).normal(size=out.shape))


def build_binary(op, denominator=False):
    def build(rng):
        shape = random_shape(rng)
        other = broadcast_partner(rng, shape)
        right = away_from_zero(rng, other) if denominator else rng.normal(size=other)
        if not denominator and rng.random() < 0.5:
            # Gebroadcasteter Operand links
            return op, [right, rng.normal(size=shape)]
        return op, [rng.normal(size=shape), right]
    return build


def build_unary(op, sample):
    def build(rng):
        return op, [sample(rng, random_shape(rng))]
    return build


def build_power(rng):
    exponent = float(rng.choice([2.0, 3.0, 0.5, -1.5]))
    return (lambda a: a ** exponent), [rng.uniform(0.5, 2.0, size=random_shape(rng))]


def build_matmul(rng):
    batch = random_shape(rng, 0, 1)
    m, k, n = (int(extent) for extent in rng.integers(1, 6, size=3))
    right = batch + (k, n) if rng.random() < 0.5 else (k, n)
    return matmul, [rng.normal(size=batch + (m, k)), rng.normal(size=right)]


def build_reduction(op):
    def build(rng):
        shape = random_shape(rng)
        axis = None if rng.random() < 0.25 else int(rng.integers(-len(shape), len(shape)))
        keepdims = bool(rng.random() < 0.5)
        return (lambda a: op(a, axis=axis, keepdims=keepdims)), [rng.normal(size=shape)]
    return build


def build_l2_norm(rng):
    shape = random_shape(rng)
    axis = int(rng.integers(-len(shape), len(shape)))
    keepdims = bool(rng.random() < 0.5)
    return (lambda a: l2_norm(a, axis=axis, keepdims=keepdims)), [away_from_zero(rng, shape, low=0.1)]


def build_reshape(rng):
    shape = random_shape(rng)
    target = shape[::-1] if rng.random() < 0.5 else (-1,)
    return (lambda a: reshape(a, target)), [rng.normal(size=shape)]


def build_transpose(rng):
    shape = random_shape(rng)
    axes = [int(ax) for ax in rng.permutation(len(shape))]
    return (lambda a: transpose(a, axes)), [rng.normal(size=shape)]


def build_getitem(rng):
    shape = random_shape(rng)
    if rng.random() < 0.5:
        # Wiederholte Indizes müssen ihre Gradienten aufsummieren
        index = (rng.integers(0, shape[0], size=int(rng.integers(1, 6))),)
    else:
        index = (slice(int(rng.integers(0, shape[0])), None),)
    return (lambda a: a[index]), [rng.normal(size=shape)]


def build_concat(rng):
    shape = random_shape(rng)
    axis = int(rng.integers(0, len(shape)))
    other = list(shape)
    other[axis] = int(rng.integers(1, 6))
    return (lambda a, b: concat([a, b], axis=axis)), [rng.normal(size=shape), rng.normal(size=other)]


def build_stack(rng):
    shape = random_shape(rng)
    axis = int(rng.integers(0, len(shape) + 1))
    return (lambda a, b: stack([a, b], axis=axis)), [rng.normal(size=shape), rng.normal(size=shape)]


def build_masked_fill(rng):
    shape = random_shape(rng)
    mask = rng.random(broadcast_partner(rng, shape)) < 0.4
    value = float(rng.choice([0.0, 5.0]))
    return (lambda a: masked_fill(a, mask, value)), [rng.normal(size=shape)]


def build_layer_norm(rng):
    shape = random_shape(rng)
    shape = shape[:-1] + (max(shape[-1], 2),)
    x = rng.normal(size=shape) + np.linspace(-2.0, 2.0, shape[-1])
    while np.var(x, axis=-1).min() < 0.05:
        x = rng.normal(size=shape) + np.linspace(-2.0, 2.0, shape[-1])
    norm = LayerNorm(shape[-1])

    def f(a, gamma, beta):
        norm.gamma, norm.beta = gamma, beta
        return norm(a)

    return f, [x, rng.normal(size=shape[-1]), rng.normal(size=shape[-1])]


def normal(rng, shape):
    return rng.normal(size=shape)


def positive(rng, shape):
    return rng.uniform(0.5, 2.0, size=shape)


class TestRandomizedOperationGradients(unittest.TestCase):
    """
    Analytische gegen numerische Gradienten jeder Operation auf je 100 zufälligen Formen (Ausdehnung <= 5)
    """

    def check(self, name, build, seed):
        rng = np.random.default_rng(seed)
        for trial in range(TRIALS):
            f, inputs = build(rng)
            weight_seed = int(rng.integers(2 ** 31))
            report = grad_check(lambda *tensors: projected(f(*tensors), weight_seed),
                                [Tensor(x) for x in inputs], name=name)
            self.assertTrue(report.passed,
                            f"{name}, Versuch {trial}, Formen {[np.shape(x) for x in inputs]}: "
                            f"{report.max_rel_error:.3e}")

    def test_add(self):
        self.check("add", build_binary(lambda a, b: a + b), 100)

    def test_sub(self):
        self.check("sub", build_binary(lambda a, b: a - b), 101)

    def test_mul(self):
        self.check("mul", build_binary(lambda a, b: a * b), 102)

    def test_div(self):
        self.check("div", build_binary(lambda a, b: a / b, denominator=True), 103)

    def test_neg(self):
        self.check("neg", build_unary(lambda a: -a, normal), 104)

    def test_power(self):
        self.check("pow", build_power, 105)

    def test_exp(self):
        self.check("exp", build_unary(lambda a: a.exp(), normal), 106)

    def test_log(self):
        self.check("log", build_unary(lambda a: a.log(), positive), 107)

    def test_sqrt(self):
        self.check("sqrt", build_unary(lambda a: a.sqrt(), positive), 108)

    def test_relu(self):
        self.check("relu", build_unary(lambda a: a.relu(), lambda rng, shape: away_from_zero(rng, shape, 0.1)), 109)

    def test_matmul(self):
        self.check("matmul", build_matmul, 110)

    def test_sum(self):
        self.check("sum", build_reduction(reduce_sum), 111)

    def test_mean(self):
        self.check("mean", build_reduction(mean), 112)

    def test_l2_norm(self):
        self.check("l2_norm", build_l2_norm, 113)

    def test_reshape(self):
        self.check("reshape", build_reshape, 114)

    def test_transpose(self):
        self.check("transpose", build_transpose, 115)

    def test_getitem(self):
        self.check("getitem", build_getitem, 116)

    def test_concat(self):
        self.check("concat", build_concat, 117)

    def test_stack(self):
        self.check("stack", build_stack, 118)

    def test_masked_fill(self):
        self.check("masked_fill", build_masked_fill, 119)

    def test_softmax(self):
        self.check("softmax", build_unary(softmax_last_axis, normal), 120)

    def test_log_softmax(self):
        self.check("log_softmax", build_unary(log_softmax, normal), 121)

    def test_layer_norm(self):
        self.check("layer_norm", build_layer_norm, 122)


if __name__ == "__main__":
    unittest.main()
