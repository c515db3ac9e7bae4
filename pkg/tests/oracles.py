"""
Skalare Referenzimplementierungen für die Tests

Alle Orakel arbeiten auf verschachtelten Python-Listen mit expliziten Schleifen und nutzen weder
NumPy-Vektorisierung noch den Autodiff-Kern.
"""

import math
from typing import List, Optional, Sequence, Tuple

Vector = List[float]
Matrix = List[List[float]]

SQUASH_EPSILON = 1e-12


def matmul_oracle(a: Sequence[Sequence[float]], b: Sequence[Sequence[float]]) -> Matrix:
    rows, inner, cols = len(a), len(b), len(b[0])
    out = [[0.0] * cols for _ in range(rows)]
    for i in range(rows):
        for j in range(cols):
            total = 0.0
            for k in range(inner):
                total += a[i][k] * b[k][j]
            out[i][j] = total
    return out


def softmax_oracle(values: Sequence[float]) -> Vector:
    peak = max(values)
    exps = [math.exp(v - peak) for v in values]
    total = sum(exps)
    return [e / total for e in exps]


def squash_oracle(s: Sequence[float]) -> Vector:
    norm_sq = sum(x * x for x in s)
    norm = math.sqrt(norm_sq)
    factor = norm_sq / ((1.0 + norm_sq) * (norm + SQUASH_EPSILON))
    return [factor * x for x in s]


def dot(a: Sequence[float], b: Sequence[float]) -> float:
    return sum(x * y for x, y in zip(a, b))


def routing_oracle(votes, iterations: int,
                   active: Optional[Sequence[bool]] = None) -> Tuple[Matrix, Matrix, Matrix]:
    """
    Handabgerolltes dynamisches Routing

    Args:
        votes: votes[m][n] ist ein Vektor der Länge K
        iterations: T
        active: Optionale Liste, welche Eingabekapseln teilnehmen

    Returns:
        (Omega[n], R[m][n], B[m][n])
    """
    num_in, num_out, length = len(votes), len(votes[0]), len(votes[0][0])
    active = [True] * num_in if active is None else list(active)
    logits = [[0.0] * num_out for _ in range(num_in)]
    coupling: Matrix = []
    omega: Matrix = []
    for _ in range(iterations):
        coupling = [softmax_oracle(logits[m]) for m in range(num_in)]
        omega = []
        for n in range(num_out):
            s = [0.0] * length
            for m in range(num_in):
                if not active[m]:
                    continue
                for k in range(length):
                    s[k] += coupling[m][n] * votes[m][n][k]
            omega.append(squash_oracle(s))
        for m in range(num_in):
            if not active[m]:
                continue
            for n in range(num_out):
                logits[m][n] += dot(omega[n], votes[m][n])
    return omega, coupling, logits


def vertical_oracle(cube, weight, bias, iterations: int):
    """
    Vertikales Routing: Köpfe stimmen für Positionen; Gate aus den Zeilensummen von B

    Returns:
        (Würfel [h][l][k], Lambda [h])
    """
    heads, length = len(cube), len(cube[0])
    votes = [[cube[h][l] for l in range(length)] for h in range(heads)]
    omega, _, logits = routing_oracle(votes, iterations)
    sums = [sum(logits[h]) for h in range(heads)]
    acceptance = [sum(weight[i][j] * sums[j] for j in range(heads)) + bias[i] for i in range(heads)]
    gate = softmax_oracle(acceptance)
    out = [[[gate[h] * value for value in omega[l]] for l in range(length)] for h in range(heads)]
    return out, acceptance


def horizontal_oracle(cube, iterations: int):
    """
    Positionelles Routing: Ausgabe l routet die Token 0..l auf H Ausgabekapseln

    Returns:
        Würfel [h][l][k]
    """
    heads, length = len(cube), len(cube[0])
    out = [[None] * length for _ in range(heads)]
    for l in range(length):
        votes = [[cube[h][t] for h in range(heads)] for t in range(l + 1)]
        omega, _, _ = routing_oracle(votes, iterations)
        for h in range(heads):
            out[h][l] = omega[h]
    return out


def cross_entropy_oracle(logits, targets, pad_id: int = 0, smoothing: float = 0.0) -> float:
    total, count = 0.0, 0
    for row_logits, row_targets in zip(logits, targets):
        for position_logits, target in zip(row_logits, row_targets):
            if target == pad_id:
                continue
            peak = max(position_logits)
            log_norm = peak + math.log(sum(math.exp(v - peak) for v in position_logits))
            vocab = len(position_logits)
            loss = 0.0
            for index, value in enumerate(position_logits):
                weight = (1.0 - smoothing) * (1.0 if index == target else 0.0) + smoothing / vocab
                loss -= weight * (value - log_norm)
            total += loss
            count += 1
    return total / count
