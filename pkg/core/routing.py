"""
Dynamisches Routing zwischen Kapseln
Nichtparametrischer Routing-Algorithmus mit Squashing-Nichtlinearität, generisch über M, N und K
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from core.tensor import (
    MASK_SENTINEL,
    Tensor,
    l2_norm,
    masked_fill,
    reduce_sum,
    softmax_last_axis,
)
from utils.errors import ContractError, DimensionError

# Logger konfigurieren
logger = logging.getLogger("capsule_transformer.routing")

# Schutz vor der Singularität des Squashings am Nullvektor
SQUASH_EPSILON = 1e-12

DEFAULT_ITERATIONS = 3


@dataclass
class VoteSet:
    """
    Stimmvektoren V[m][n] der Länge K für M Eingabe- und N Ausgabekapseln

    votes hat die Form (..., M, N, K); führende Achsen sind unabhängige Routings.
    """
    votes: Tensor
    iterations: int = DEFAULT_ITERATIONS

    def __post_init__(self):
        if not isinstance(self.votes, Tensor):
            self.votes = Tensor(self.votes)

    @property
    def num_inputs(self) -> int:
        return self.votes.shape[-3]

    @property
    def num_outputs(self) -> int:
        return self.votes.shape[-2]

    @property
    def vector_length(self) -> int:
        return self.votes.shape[-1]

    def validate(self) -> None:
        if self.votes.ndim < 3:
            raise DimensionError("Stimmvektoren benötigen die Form (..., M, N, K)", self.votes.shape)
        if min(self.votes.shape[-3:]) < 1:
            raise DimensionError("M, N und K müssen mindestens 1 sein", self.votes.shape)
        if isinstance(self.iterations, bool) or int(self.iterations) != self.iterations or self.iterations < 1:
            raise ContractError(f"Routing benötigt T >= 1 Iterationen, erhalten: {self.iterations}")
        if not np.all(np.isfinite(self.votes.data)):
            raise ContractError("Stimmvektoren müssen endlich sein")


@dataclass
class RoutingResult:
    """
    Ergebnis des Routings

    omega: Ausgabekapseln (..., N, K); logits: Stimmgewichte B (..., M, N) nach der letzten Iteration;
    coupling: Koppelkoeffizienten R (..., M, N) der letzten Iteration.
    """
    omega: Tensor
    logits: Tensor
    coupling: Tensor
    coupling_history: List[np.ndarray] = field(default_factory=list)
    pre_squash: Optional[Tensor] = None


def squash(s: Tensor) -> Tensor:
    """
    Squashing-Nichtlinearität entlang der letzten Achse

    Gibt (||s||^2 / (1 + ||s||^2)) * s / (||s|| + eps) zurück; die Richtung bleibt erhalten,
    die Norm liegt in [0, 1).

    Args:
        s: Vektoren (..., K)

    Returns:
        Tensor: Gestauchte Vektoren gleicher Form
    """
    norm_sq = reduce_sum(s * s, axis=-1, keepdims=True)
    norm = l2_norm(s, axis=-1, keepdims=True)
    return s * (norm_sq / ((1.0 + norm_sq) * (norm + SQUASH_EPSILON)))


def _append_axis(x: Tensor, position: int) -> Tensor:
    shape = list(x.shape)
    shape.insert(position % (x.ndim + 1), 1)
    return x.reshape(tuple(shape))


def dynamic_routing(vote_set: VoteSet, input_mask: Optional[np.ndarray] = None,
                    output_mask: Optional[np.ndarray] = None, detach_coupling: bool = False) -> RoutingResult:
    """
    Führt das dynamische Routing über T Iterationen aus

    Pro Iteration: R[m, :] = softmax(B[m, :]) über den Ausgabeindex, S_n = sum_m R[m, n] V[m, n],
    Omega_n = squash(S_n), B[m, n] += Omega_n . V[m, n].

    Args:
        vote_set: Stimmvektoren und Iterationszahl
        input_mask: Optionale Maske (..., M), True = Eingabekapsel nimmt teil
        output_mask: Optionale Maske (..., N), True = Ausgabekapsel existiert
        detach_coupling: Koppelkoeffizienten aus dem Gradientengraphen lösen

    Returns:
        RoutingResult: Ausgabekapseln, Stimmgewichte und Koppelkoeffizienten
    """
    vote_set.validate()
    votes = vote_set.votes
    num_inputs, num_outputs = vote_set.num_inputs, vote_set.num_outputs

    batch_shapes = [votes.shape[:-3]]
    if input_mask is not None:
        input_mask = np.asarray(input_mask, dtype=bool)
        batch_shapes.append(input_mask.shape[:-1])
    if output_mask is not None:
        output_mask = np.asarray(output_mask, dtype=bool)
        batch_shapes.append(output_mask.shape[:-1])
    try:
        batch_shape = np.broadcast_shapes(*batch_shapes)
    except ValueError:
        raise DimensionError("Masken passen nicht zu den Stimmvektoren", *batch_shapes) from None

    logits = Tensor(np.zeros(batch_shape + (num_inputs, num_outputs)))
    history: List[np.ndarray] = []
    coupling = omega = pre_squash = None

    for _ in range(vote_set.iterations):
        routed_logits = logits.detach() if detach_coupling else logits
        if output_mask is not None:
            routed_logits = masked_fill(routed_logits, ~output_mask[..., None, :], MASK_SENTINEL)
        coupling = softmax_last_axis(routed_logits)
        history.append(coupling.data)

        weighted = _append_axis(coupling, -1) * votes  # (..., M, N, K)
        if input_mask is not None:
            weighted = masked_fill(weighted, ~input_mask[..., :, None, None], 0.0)
        pre_squash = reduce_sum(weighted, axis=-3)  # (..., N, K)
        omega = squash(pre_squash)

        agreement = reduce_sum(_append_axis(omega, -3) * votes, axis=-1)  # (..., M, N)
        if input_mask is not None:
            agreement = masked_fill(agreement, ~input_mask[..., None], 0.0)
        logits = logits + agreement

    return RoutingResult(omega=omega, logits=logits, coupling=coupling,
                         coupling_history=history, pre_squash=pre_squash)
