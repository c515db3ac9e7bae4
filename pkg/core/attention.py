"""
Multi-Head-Selbstaufmerksamkeit
Erzeugt und verarbeitet den Attention-Würfel der Logits, sodass das Routing ihn vor dem Softmax abgreifen kann
"""

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Tuple, Union

import numpy as np

from core.module import Module, xavier_uniform
from core.tensor import (
    MASK_SENTINEL,
    Tensor,
    causal_mask,
    masked_fill,
    matmul,
    scale,
    softmax_last_axis,
    stack,
    swapaxes,
    transpose_last_two,
)
from utils.errors import ConfigurationError, DimensionError

# Logger konfigurieren
logger = logging.getLogger("capsule_transformer.attention")


class MultiHeadProjection(Module):
    """
    Trainierbare Projektionen einer Multi-Head-Aufmerksamkeit

    Pro Kopf h je eine Matrix W_Q_h, W_K_h, W_V_h der Form (d, d/H) sowie eine
    gemeinsame Ausgabematrix W_O der Form (d, d).
    """

    def __init__(self, d_model: int, num_heads: int, rng: np.random.Generator):
        """
        Initialisiert die Projektionen

        Args:
            d_model: Modellbreite d
            num_heads: Anzahl der Köpfe H (muss d teilen)
            rng: Zufallsgenerator für die Initialisierung
        """
        if num_heads <= 0 or d_model % num_heads:
            raise ConfigurationError(f"H={num_heads} teilt d={d_model} nicht", key="num_heads")
        self.d_model = d_model
        self.num_heads = num_heads
        self.d_head = d_model // num_heads
        self.w_q = [xavier_uniform(rng, d_model, self.d_head) for _ in range(num_heads)]
        self.w_k = [xavier_uniform(rng, d_model, self.d_head) for _ in range(num_heads)]
        self.w_v = [xavier_uniform(rng, d_model, self.d_head) for _ in range(num_heads)]
        self.w_o = xavier_uniform(rng, d_model, d_model)

    def forward(self, x: Tensor, memory: Optional[Tensor] = None) -> Tuple[Tensor, Tensor, Tensor]:
        return project(x, self, memory)


@dataclass
class AttentionCube:
    """
    Würfel der Attention-Logits vor dem Softmax

    logits hat die Form (..., H, L, K); Zeile (h, l, :) ist der Attention-Vektor e_{l,h}.
    """
    logits: Tensor
    d_k: int

    @property
    def num_heads(self) -> int:
        return self.logits.shape[-3]

    @property
    def query_len(self) -> int:
        return self.logits.shape[-2]

    @property
    def key_len(self) -> int:
        return self.logits.shape[-1]

    def with_logits(self, logits: Tensor) -> "AttentionCube":
        return AttentionCube(logits=logits, d_k=self.d_k)


def project(x: Tensor, projection: MultiHeadProjection,
            memory: Optional[Tensor] = None) -> Tuple[Tensor, Tensor, Tensor]:
    """
    Projiziert die Eingabe in H Unterräume

    Args:
        x: Eingabe der Form (..., L, d)
        projection: Projektionsgewichte
        memory: Optionale Quelle für Schlüssel und Werte (Kreuzaufmerksamkeit)

    Returns:
        Tuple[Tensor, Tensor, Tensor]: Q, K, V jeweils der Form (..., H, L, d/H)
    """
    source = x if memory is None else memory
    for tensor in (x, source):
        if tensor.shape[-1] != projection.d_model:
            raise DimensionError(f"Eingabebreite muss d={projection.d_model} sein", tensor.shape)
    queries = stack([matmul(x, w) for w in projection.w_q], axis=-3)
    keys = stack([matmul(source, w) for w in projection.w_k], axis=-3)
    values = stack([matmul(source, w) for w in projection.w_v], axis=-3)
    return queries, keys, values


def logits(queries: Tensor, keys: Tensor) -> AttentionCube:
    """
    Berechnet die skalierten Skalarprodukte E_h = Q_h K_h^T / sqrt(d_k)

    Args:
        queries: Anfragen (..., H, L, d_k)
        keys: Schlüssel (..., H, K, d_k)

    Returns:
        AttentionCube: Logits-Würfel (..., H, L, K)
    """
    d_k = queries.shape[-1]
    if d_k == 0:
        raise ConfigurationError("d_k darf nicht 0 sein")
    if keys.shape[-1] != d_k:
        raise DimensionError("Anfragen und Schlüssel haben unterschiedliche Breite", queries.shape, keys.shape)
    return AttentionCube(logits=scale(matmul(queries, transpose_last_two(keys)), 1.0 / np.sqrt(d_k)), d_k=d_k)


def key_padding_to_cube(key_padding_mask: np.ndarray) -> np.ndarray:
    """
    Erweitert eine Maske (B, K) auf die Würfelform (B, 1, 1, K)
    """
    return np.asarray(key_padding_mask, dtype=bool)[..., None, None, :]


def attend(cube: AttentionCube, values: Tensor, projection: MultiHeadProjection, causal: bool = False,
           key_padding_mask: Optional[np.ndarray] = None,
           dropout: Optional[Callable[[Tensor], Tensor]] = None,
           return_weights: bool = False) -> Union[Tensor, Tuple[Tensor, Tensor]]:
    """
    Wendet Softmax auf den Würfel an und kombiniert die Gewichte mit den Werten

    Args:
        cube: Finalisierter Logits-Würfel (Routing-Offsets bereits addiert)
        values: Werte (..., H, K, d_k)
        projection: Projektion mit Ausgabematrix W_O
        causal: Vorwärtsmaske mit MASK_SENTINEL anwenden
        key_padding_mask: Optionale Maske (..., K), True = Padding
        dropout: Optionales Dropout auf die Gewichte nach dem Softmax
        return_weights: Zusätzlich die Attention-Gewichte zurückgeben

    Returns:
        Tensor: Ausgabe (..., L, d) und optional die Gewichte (..., H, L, K)
    """
    scores = cube.logits
    if causal:
        scores = masked_fill(scores, causal_mask(cube.query_len, cube.key_len), MASK_SENTINEL)
    if key_padding_mask is not None:
        scores = masked_fill(scores, key_padding_to_cube(key_padding_mask), MASK_SENTINEL)

    weights = softmax_last_axis(scores)
    attended = weights if dropout is None else dropout(weights)
    heads = matmul(attended, values)  # (..., H, L, d_k)

    # Konkatenation der Köpfe: (..., L, H, d_k) -> (..., L, d)
    merged = swapaxes(heads, -3, -2)
    merged = merged.reshape(merged.shape[:-2] + (projection.d_model,))
    output = matmul(merged, projection.w_o)
    if return_weights:
        return output, weights
    return output


def vanilla_attention(x: Tensor, projection: MultiHeadProjection, causal: bool = False,
                      key_padding_mask: Optional[np.ndarray] = None, memory: Optional[Tensor] = None,
                      dropout: Optional[Callable[[Tensor], Tensor]] = None) -> Tensor:
    """
    Standard-Multi-Head-Aufmerksamkeit ohne Routing (Referenz für die Ablations-Identität)
    """
    queries, keys, values = project(x, projection, memory)
    return attend(logits(queries, keys), values, projection, causal=causal,
                  key_padding_mask=key_padding_mask, dropout=dropout)
