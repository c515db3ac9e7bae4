"""
Capsule Routing Self-Attention Network
Bildet vertikale und horizontale Kapseln aus dem Attention-Würfel, routet sie und addiert die
Ausgabekapseln vor dem Softmax auf die Logits
"""

import logging
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from core.attention import AttentionCube, MultiHeadProjection, attend, logits, project
from core.module import Dropout, Module
from core.routing import DEFAULT_ITERATIONS, RoutingResult, VoteSet, dynamic_routing
from core.tensor import (
    Tensor,
    causal_mask,
    masked_fill,
    matmul,
    reduce_sum,
    softmax_last_axis,
    stack,
    swapaxes,
    transpose_last_two,
    unstack,
)
from utils.errors import ConfigurationError

# Logger konfigurieren
logger = logging.getLogger("capsule_transformer.capsule_san")

HORIZONTAL_IMPLEMENTATIONS = ("batched", "reference")


@dataclass
class VerticalCapsules:
    """
    H kopfweise Kapseln, jede eine (L, K)-Matrix aller Attention-Vektoren eines Kopfes
    """
    capsules: List[Tensor]

    def restack(self) -> Tensor:
        return stack(self.capsules, axis=-3)


@dataclass
class HorizontalCapsules:
    """
    L tokenweise Kapseln, jede eine (H, K)-Matrix der Attention-Vektoren eines Tokens über alle Köpfe
    """
    capsules: List[Tensor]

    def restack(self) -> Tensor:
        return stack(self.capsules, axis=-2)


def split_vertical(cube: AttentionCube) -> VerticalCapsules:
    return VerticalCapsules(unstack(cube.logits, axis=-3))


def split_horizontal(cube: AttentionCube) -> HorizontalCapsules:
    return HorizontalCapsules(unstack(cube.logits, axis=-2))


class AcceptanceGate(Module):
    """
    Trainierbares Akzeptanz-Gate einer Encoder-Schicht

    Lambda = W · [sum_l B_{1->l}, ..., sum_l B_{H->l}] + b mit W (H, H) und b (H,).
    """

    def __init__(self, num_heads: int, rng: Optional[np.random.Generator] = None):
        self.num_heads = num_heads
        if rng is None:
            weight = np.zeros((num_heads, num_heads))
        else:
            weight = rng.normal(0.0, 1.0 / np.sqrt(num_heads), size=(num_heads, num_heads))
        self.weight = Tensor(weight, requires_grad=True)
        self.bias = Tensor(np.zeros(num_heads), requires_grad=True)

    @staticmethod
    def parameter_count_for(num_heads: int) -> int:
        return num_heads * num_heads + num_heads

    def forward(self, vote_sums: Tensor) -> Tensor:
        return matmul(vote_sums.expand_dims(-2), transpose_last_two(self.weight)).reshape(vote_sums.shape) + self.bias


@dataclass
class VerticalRoutingResult:
    """
    Ergebnis des vertikalen Routings

    omega: gewichteter Würfel (..., H, L, K); shared: gemeinsame Ausgabekapseln (..., L, K);
    acceptance: Lambda (..., H); gate: softmax(Lambda) (..., H).
    """
    omega: Tensor
    shared: Tensor
    acceptance: Tensor
    gate: Tensor
    routing: RoutingResult


def vertical_routing(cube: AttentionCube, gate: AcceptanceGate, iterations: int = DEFAULT_ITERATIONS,
                     query_mask: Optional[np.ndarray] = None,
                     detach_coupling: bool = False) -> VerticalRoutingResult:
    """
    Routet H vertikale Eingabekapseln auf L Ausgabekapseln und gewichtet sie pro Kopf

    Die Stimme des Kopfes h an die Ausgabe l ist e_{l,h}. Die Ausgabekapseln bilden die
    gemeinsame (L, K)-Matrix, die pro Kopf mit lambda_h skaliert wird.

    Args:
        cube: Logits-Würfel (..., H, L, K)
        gate: Akzeptanz-Gate der Schicht
        iterations: Routing-Iterationen T
        query_mask: Optionale Maske (..., L), True = reale Position
        detach_coupling: Koppelkoeffizienten vom Gradienten lösen

    Returns:
        VerticalRoutingResult: Würfel der vertikalen Ausgabekapsel und Zwischenergebnisse
    """
    routing = dynamic_routing(VoteSet(cube.logits, iterations), output_mask=query_mask,
                              detach_coupling=detach_coupling)
    shared = routing.omega  # (..., L, K)
    acceptance = gate(reduce_sum(routing.logits, axis=-1))  # (..., H)
    weights = softmax_last_axis(acceptance)
    omega = weights.reshape(weights.shape + (1, 1)) * shared.expand_dims(-3)
    return VerticalRoutingResult(omega=omega, shared=shared, acceptance=acceptance, gate=weights,
                                 routing=routing)


def horizontal_routing(cube: AttentionCube, iterations: int = DEFAULT_ITERATIONS,
                       token_mask: Optional[np.ndarray] = None, detach_coupling: bool = False) -> Tensor:
    """
    Positionelles Routing als L unabhängige Teil-Routings (Referenzpfad)

    Für Position l werden nur die horizontalen Kapseln t <= l auf H Ausgabekapseln geroutet.

    Args:
        cube: Logits-Würfel (..., H, L, K)
        iterations: Routing-Iterationen T
        token_mask: Optionale Maske (..., L), True = reale Position
        detach_coupling: Koppelkoeffizienten vom Gradienten lösen

    Returns:
        Tensor: Würfel der horizontalen Ausgabekapsel (..., H, L, K)
    """
    if token_mask is not None:
        token_mask = np.asarray(token_mask, dtype=bool)
    tokens_first = swapaxes(cube.logits, -3, -2)  # (..., L, H, K): Eingabe t, Ausgabe h
    outputs = []
    for position in range(cube.query_len):
        prefix = tokens_first[..., : position + 1, :, :]
        prefix_mask = None if token_mask is None else token_mask[..., : position + 1]
        result = dynamic_routing(VoteSet(prefix, iterations), input_mask=prefix_mask,
                                 detach_coupling=detach_coupling)
        outputs.append(result.omega)  # (..., H, K)
    return stack(outputs, axis=-2)


def horizontal_routing_batched(cube: AttentionCube, iterations: int = DEFAULT_ITERATIONS,
                               token_mask: Optional[np.ndarray] = None,
                               detach_coupling: bool = False) -> Tensor:
    """
    Positionelles Routing aller L Präfixe in einem maskierten Routing-Aufruf

    Stimmt mit horizontal_routing bis auf Rundung (1e-12) überein; maskierte Kapseln tragen exakt
    nichts bei, sodass spätere Zeilen frühere Ausgaben bitgenau nicht beeinflussen.

    Args:
        cube: Logits-Würfel (..., H, L, K)
        iterations: Routing-Iterationen T
        token_mask: Optionale Maske (..., L), True = reale Position
        detach_coupling: Koppelkoeffizienten vom Gradienten lösen

    Returns:
        Tensor: Würfel der horizontalen Ausgabekapsel (..., H, L, K)
    """
    length = cube.query_len
    tokens_first = swapaxes(cube.logits, -3, -2)  # (..., L, H, K)
    prefix_mask = np.tril(np.ones((length, length), dtype=bool))  # [l, t]: t <= l
    if token_mask is not None:
        prefix_mask = prefix_mask & np.asarray(token_mask, dtype=bool)[..., None, :]
    votes = tokens_first.expand_dims(-4)  # (..., 1, L, H, K)
    result = dynamic_routing(VoteSet(votes, iterations), input_mask=prefix_mask,
                             detach_coupling=detach_coupling)
    return swapaxes(result.omega, -3, -2)  # (..., L, H, K) -> (..., H, L, K)


class CapsuleSelfAttention(Module):
    """
    Selbstaufmerksamkeit mit optionalem vertikalem und horizontalem Kapsel-Routing

    Mit beiden Routing-Pfaden deaktiviert entspricht die Schicht exakt der Standard-Aufmerksamkeit.
    """

    def __init__(self, d_model: int, num_heads: int, rng: np.random.Generator,
                 vertical: bool = False, horizontal: bool = False, iterations: int = DEFAULT_ITERATIONS,
                 gate_rng: Optional[np.random.Generator] = None, detach_coupling: bool = False,
                 horizontal_impl: str = "batched", dropout: Optional[Dropout] = None):
        """
        Initialisiert die Schicht

        Args:
            d_model: Modellbreite d
            num_heads: Anzahl der Köpfe H
            rng: Zufallsgenerator für die Projektionen
            vertical: Vertikales Routing aktivieren (nur Encoder)
            horizontal: Horizontales Routing aktivieren
            iterations: Routing-Iterationen T
            gate_rng: Separater Zufallsgenerator für das Akzeptanz-Gate
            detach_coupling: Koppelkoeffizienten vom Gradienten lösen
            horizontal_impl: 'batched' oder 'reference'
            dropout: Dropout auf die Attention-Gewichte
        """
        if horizontal_impl not in HORIZONTAL_IMPLEMENTATIONS:
            raise ConfigurationError(f"Unbekannte Implementierung: {horizontal_impl}", key="horizontal_impl")
        self.projection = MultiHeadProjection(d_model, num_heads, rng)
        self.gate = AcceptanceGate(num_heads, gate_rng) if vertical else None
        self.vertical = vertical
        self.horizontal = horizontal
        self.iterations = iterations
        self.detach_coupling = detach_coupling
        self.horizontal_impl = horizontal_impl
        self.dropout = dropout
        self.last_attention: Optional[np.ndarray] = None
        logger.debug(f"CapsuleSelfAttention initialisiert (vertikal={vertical}, horizontal={horizontal}, "
                     f"T={iterations}, Implementierung={horizontal_impl})")

    @property
    def routing_enabled(self) -> bool:
        return self.vertical or self.horizontal

    def forward(self, x: Tensor, causal: bool = False, key_padding_mask: Optional[np.ndarray] = None) -> Tensor:
        return capsule_san_forward(x, self, causal=causal, key_padding_mask=key_padding_mask)


def capsule_san_forward(x: Tensor, layer: CapsuleSelfAttention, causal: bool = False,
                        key_padding_mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Vorwärtsschritt der Capsule-Routing-Selbstaufmerksamkeit

    E' = E + Omega_vertikal + Omega_horizontal; im Decoder wird E vor dem Routing mit 0 und
    E' vor dem Softmax mit dem Sentinel maskiert.

    Args:
        x: Eingabe (..., L, d)
        layer: Schicht mit Gewichten und Routing-Flags
        causal: Decoder-Modus mit Vorwärtsmaske
        key_padding_mask: Optionale Maske (..., L), True = Padding

    Returns:
        Tensor: Ausgabe (..., L, d)
    """
    if causal and layer.vertical:
        raise ConfigurationError("Vertikales Routing ist im Decoder (causal=True) nicht zulässig",
                                 key="vertical_enabled")

    queries, keys, values = project(x, layer.projection)
    cube = logits(queries, keys)
    scores = cube.logits

    if layer.routing_enabled:
        routed = scores
        if causal:
            routed = masked_fill(routed, causal_mask(cube.query_len, cube.key_len), 0.0)
        token_mask = None
        if key_padding_mask is not None:
            key_padding_mask = np.asarray(key_padding_mask, dtype=bool)
            routed = masked_fill(routed, key_padding_mask[..., None, None, :], 0.0)
            token_mask = ~key_padding_mask
        routed_cube = cube.with_logits(routed)

        if layer.vertical:
            vertical = vertical_routing(routed_cube, layer.gate, layer.iterations, query_mask=token_mask,
                                        detach_coupling=layer.detach_coupling)
            scores = scores + vertical.omega
        if layer.horizontal:
            if layer.horizontal_impl == "reference":
                horizontal = horizontal_routing(routed_cube, layer.iterations, token_mask=token_mask,
                                                detach_coupling=layer.detach_coupling)
            else:
                horizontal = horizontal_routing_batched(routed_cube, layer.iterations, token_mask=token_mask,
                                                        detach_coupling=layer.detach_coupling)
            scores = scores + horizontal

    output, weights = attend(cube.with_logits(scores), values, layer.projection, causal=causal,
                             key_padding_mask=key_padding_mask, dropout=layer.dropout, return_weights=True)
    layer.last_attention = weights.data
    return output
