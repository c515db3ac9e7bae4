"""
Encoder-Decoder-Transformer mit Capsule-Routing-Selbstaufmerksamkeit
Setzt Einbettungen, sinusförmige Positionskodierung, Feed-Forward-Schichten, Residualverbindungen
und Layer-Normalisierung um die Capsule-SAN-Teilschichten zusammen
"""

import logging
from dataclasses import asdict, dataclass, fields, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from core.attention import MultiHeadProjection, vanilla_attention
from core.capsule_san import HORIZONTAL_IMPLEMENTATIONS, AcceptanceGate, CapsuleSelfAttention
from core.module import Dropout, Module, ones_parameter, xavier_uniform, zeros_parameter
from core.tensor import Tensor, get_default_dtype, matmul, mean, no_grad, set_default_dtype, sqrt
from utils.errors import ConfigurationError, InputError

# Logger konfigurieren
logger = logging.getLogger("capsule_transformer.model")

# Reservierte Token-IDs
PAD = 0
BOS = 1
EOS = 2
FIRST_CONTENT_ID = 3

VARIANTS = ("vanilla", "capsule")
PRECISIONS = ("float64", "float32")

LAYER_NORM_EPSILON = 1e-6

TokenBatch = Union[Sequence[int], Sequence[Sequence[int]], np.ndarray]


@dataclass
class ModelConfig:
    """
    Hyperparameter des Modells einschließlich der Routing-Schalter für die Ablationen

    routing_layer_range ist ein 1-basierter, inklusiver Bereich (a, b) von Encoder-Schichten;
    None bedeutet alle Encoder-Schichten.
    """
    d_model: int = 64
    num_heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    d_ff: int = 128
    iterations: int = 3
    dropout: float = 0.1
    vertical_enabled: bool = True
    horizontal_enabled: bool = True
    routing_in_encoder: bool = True
    routing_in_decoder: bool = True
    routing_layer_range: Optional[Tuple[int, int]] = None
    vocab_size: int = 32
    max_len: int = 24
    detach_coupling: bool = False
    horizontal_impl: str = "batched"
    precision: str = "float64"

    def __post_init__(self):
        if self.routing_layer_range is not None:
            self.routing_layer_range = tuple(int(v) for v in self.routing_layer_range)

    def validate(self) -> "ModelConfig":
        """
        Prüft die Konfiguration und wirft bei Verstößen eine ConfigurationError mit dem Schlüsselnamen

        Returns:
            ModelConfig: Die geprüfte Konfiguration selbst
        """
        for key in ("d_model", "num_heads", "enc_layers", "dec_layers", "d_ff", "iterations", "max_len"):
            if getattr(self, key) < 1:
                raise ConfigurationError(f"{key} muss mindestens 1 sein, erhalten: {getattr(self, key)}", key=key)
        if self.d_model % self.num_heads:
            raise ConfigurationError(f"H={self.num_heads} teilt d={self.d_model} nicht", key="num_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout muss in [0, 1) liegen, erhalten: {self.dropout}", key="dropout")
        if self.vocab_size <= FIRST_CONTENT_ID:
            raise ConfigurationError(f"vocab_size muss größer als {FIRST_CONTENT_ID} sein (PAD, BOS, EOS reserviert)",
                                     key="vocab_size")
        if self.routing_layer_range is not None:
            first, last = self.routing_layer_range
            if not 1 <= first <= last <= self.enc_layers:
                raise ConfigurationError(
                    f"routing_layer_range {first}..{last} liegt nicht in 1..{self.enc_layers}", key="routing_layer_range")
        if self.horizontal_impl not in HORIZONTAL_IMPLEMENTATIONS:
            raise ConfigurationError(f"Unbekannte Implementierung: {self.horizontal_impl}", key="horizontal_impl")
        if self.precision not in PRECISIONS:
            raise ConfigurationError(f"Nicht unterstützte Präzision: {self.precision}", key="precision")
        return self

    # Routing-Topologie
    def encoder_routing(self, layer: int) -> Tuple[bool, bool]:
        """
        Gibt (vertikal, horizontal) für die Encoder-Schicht mit 1-basiertem Index layer zurück
        """
        if not self.routing_in_encoder:
            return False, False
        if self.routing_layer_range is not None:
            first, last = self.routing_layer_range
            if not first <= layer <= last:
                return False, False
        return self.vertical_enabled, self.horizontal_enabled

    def decoder_horizontal(self) -> bool:
        return self.routing_in_decoder and self.horizontal_enabled

    def gate_layer_count(self) -> int:
        return sum(1 for layer in range(1, self.enc_layers + 1) if self.encoder_routing(layer)[0])

    def added_parameter_count(self) -> int:
        """
        Anzahl der Parameter, die das Routing gegenüber dem Vanilla-Modell hinzufügt
        """
        return self.gate_layer_count() * AcceptanceGate.parameter_count_for(self.num_heads)

    # Varianten
    def as_vanilla(self) -> "ModelConfig":
        return replace(self, vertical_enabled=False, horizontal_enabled=False)

    def ablation(self, encoder: bool = True, decoder: bool = True, vertical: bool = True, horizontal: bool = True,
                 layers: Optional[Tuple[int, int]] = None) -> "ModelConfig":
        """
        Erzeugt eine Ablations-Variante dieser Konfiguration

        Args:
            encoder: Routing im Encoder
            decoder: Routing im Decoder (nur horizontal)
            vertical: Vertikales Routing
            horizontal: Horizontales Routing
            layers: Optionaler Bereich der Encoder-Schichten (a, b)

        Returns:
            ModelConfig: Geprüfte Variante
        """
        return replace(self, routing_in_encoder=encoder, routing_in_decoder=decoder, vertical_enabled=vertical,
                       horizontal_enabled=horizontal, routing_layer_range=layers).validate()

    def ablation_lattice(self) -> Dict[str, "ModelConfig"]:
        """
        Alle Kombinationen {Encoder, Decoder, beide} x {vertikal, horizontal, beide} x Schichtbereiche
        """
        placements = {"enc": (True, False), "dec": (False, True), "both": (True, True)}
        paths = {"vertical": (True, False), "horizontal": (False, True), "both": (True, True)}
        ranges: List[Optional[Tuple[int, int]]] = [None]
        ranges += [(first, last) for first in range(1, self.enc_layers + 1)
                   for last in range(first, self.enc_layers + 1) if (first, last) != (1, self.enc_layers)]
        lattice = {}
        for place_name, (encoder, decoder) in placements.items():
            for path_name, (vertical, horizontal) in paths.items():
                for layers in ranges:
                    suffix = "all" if layers is None else f"{layers[0]}..{layers[1]}"
                    lattice[f"{place_name}-{path_name}-{suffix}"] = self.ablation(
                        encoder, decoder, vertical, horizontal, layers)
        return lattice

    @classmethod
    def from_preset(cls, name: str, **overrides: Any) -> "ModelConfig":
        if name not in MODEL_PRESETS:
            raise ConfigurationError(f"Unbekanntes Preset: {name}", key="preset")
        return cls(**{**MODEL_PRESETS[name], **overrides})

    # Serialisierung
    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        if self.routing_layer_range is not None:
            data["routing_layer_range"] = list(self.routing_layer_range)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigurationError(f"Unbekannter Schlüssel in der Modellkonfiguration: {unknown[0]}", key=unknown[0])
        return cls(**data)


MODEL_PRESETS: Dict[str, Dict[str, Any]] = {
    "toy": {},
    "base": {"d_model": 512, "num_heads": 8, "enc_layers": 6, "dec_layers": 6, "d_ff": 2048,
             "dropout": 0.1, "vocab_size": 32000, "max_len": 256},
    "big": {"d_model": 1024, "num_heads": 16, "enc_layers": 6, "dec_layers": 6, "d_ff": 4096,
            "dropout": 0.3, "vocab_size": 32000, "max_len": 256},
}


def sinusoidal_encoding(positions: int, d_model: int) -> np.ndarray:
    """
    Sinusförmige Positionskodierung der Form (positions, d_model)
    """
    pos = np.arange(positions)[:, None]
    rates = np.exp(-np.log(10000.0) * np.arange(0, d_model, 2) / d_model)
    table = np.zeros((positions, d_model))
    table[:, 0::2] = np.sin(pos * rates)
    table[:, 1::2] = np.cos(pos * rates[: d_model // 2])
    return table


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator):
        self.weight = xavier_uniform(rng, fan_in, fan_out)
        self.bias = zeros_parameter(fan_out)

    def forward(self, x: Tensor) -> Tensor:
        return matmul(x, self.weight) + self.bias


class Embedding(Module):
    """
    Token-Einbettung, skaliert mit sqrt(d)
    """

    def __init__(self, vocab_size: int, d_model: int, rng: np.random.Generator):
        self.vocab_size = vocab_size
        self.d_model = d_model
        self.weight = Tensor(rng.normal(0.0, d_model ** -0.5, size=(vocab_size, d_model)), requires_grad=True)

    def forward(self, ids: np.ndarray) -> Tensor:
        return self.weight[np.asarray(ids, dtype=np.int64)] * np.sqrt(self.d_model)


class LayerNorm(Module):
    def __init__(self, d_model: int):
        self.gamma = ones_parameter(d_model)
        self.beta = zeros_parameter(d_model)

    def forward(self, x: Tensor) -> Tensor:
        centered = x - mean(x, axis=-1, keepdims=True)
        variance = mean(centered * centered, axis=-1, keepdims=True)
        return centered / sqrt(variance + LAYER_NORM_EPSILON) * self.gamma + self.beta


class FeedForward(Module):
    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator):
        self.inner = Linear(d_model, d_ff, rng)
        self.outer = Linear(d_ff, d_model, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.outer(self.inner(x).relu())


class EncoderLayer(Module):
    """
    Pre-Norm-Encoder-Schicht: Capsule-SAN und Feed-Forward mit Residualverbindungen
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator, gate_rng: np.random.Generator,
                 dropout_rng: np.random.Generator, vertical: bool, horizontal: bool):
        self.attention_norm = LayerNorm(config.d_model)
        self.self_attention = CapsuleSelfAttention(
            config.d_model, config.num_heads, rng, vertical=vertical, horizontal=horizontal,
            iterations=config.iterations, gate_rng=gate_rng, detach_coupling=config.detach_coupling,
            horizontal_impl=config.horizontal_impl, dropout=Dropout(config.dropout, dropout_rng))
        self.ffn_norm = LayerNorm(config.d_model)
        self.ffn = FeedForward(config.d_model, config.d_ff, rng)
        self.residual_dropout = Dropout(config.dropout, dropout_rng)

    def forward(self, x: Tensor, padding_mask: Optional[np.ndarray] = None) -> Tensor:
        x = x + self.residual_dropout(self.self_attention(self.attention_norm(x), causal=False,
                                                          key_padding_mask=padding_mask))
        return x + self.residual_dropout(self.ffn(self.ffn_norm(x)))


class DecoderLayer(Module):
    """
    Pre-Norm-Decoder-Schicht: kausale Capsule-SAN (nur horizontal), Kreuzaufmerksamkeit, Feed-Forward
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator, dropout_rng: np.random.Generator,
                 horizontal: bool):
        self.attention_norm = LayerNorm(config.d_model)
        self.self_attention = CapsuleSelfAttention(
            config.d_model, config.num_heads, rng, vertical=False, horizontal=horizontal,
            iterations=config.iterations, detach_coupling=config.detach_coupling,
            horizontal_impl=config.horizontal_impl, dropout=Dropout(config.dropout, dropout_rng))
        self.cross_norm = LayerNorm(config.d_model)
        self.cross_attention = MultiHeadProjection(config.d_model, config.num_heads, rng)
        self.cross_dropout = Dropout(config.dropout, dropout_rng)
        self.ffn_norm = LayerNorm(config.d_model)
        self.ffn = FeedForward(config.d_model, config.d_ff, rng)
        self.residual_dropout = Dropout(config.dropout, dropout_rng)

    def forward(self, x: Tensor, memory: Tensor, target_padding_mask: Optional[np.ndarray] = None,
                source_padding_mask: Optional[np.ndarray] = None) -> Tensor:
        x = x + self.residual_dropout(self.self_attention(self.attention_norm(x), causal=True,
                                                          key_padding_mask=target_padding_mask))
        x = x + self.residual_dropout(vanilla_attention(self.cross_norm(x), self.cross_attention, memory=memory,
                                                        key_padding_mask=source_padding_mask,
                                                        dropout=self.cross_dropout))
        return x + self.residual_dropout(self.ffn(self.ffn_norm(x)))


def _as_batch(ids: TokenBatch) -> Tuple[np.ndarray, bool]:
    if isinstance(ids, np.ndarray):
        array = ids
    else:
        rows = list(ids)
        if rows and not np.isscalar(rows[0]):
            width = max((len(row) for row in rows), default=0)
            array = np.full((len(rows), width), PAD, dtype=np.int64)
            for i, row in enumerate(rows):
                array[i, : len(row)] = row
        else:
            array = np.asarray(rows, dtype=np.int64)
    if array.ndim == 1:
        return array.reshape(1, -1).astype(np.int64), True
    if array.ndim != 2:
        raise InputError(f"Token-Folgen müssen 1- oder 2-dimensional sein, erhalten: {array.ndim}")
    return array.astype(np.int64), False


class Seq2SeqModel(Module):
    """
    Encoder-Decoder-Transformer für die synthetischen Sequenzaufgaben

    Mit allen Routing-Schaltern deaktiviert ist das Modell das Vanilla-Baseline-Modell; bei gleichem
    Seed sind alle Basisparameter identisch, die Akzeptanz-Gates stammen aus einem eigenen Zufallsstrom.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        """
        Initialisiert das Modell

        Args:
            config: Modellkonfiguration
            seed: Seed für Initialisierung und Dropout
        """
        self.config = config.validate()
        set_default_dtype(config.precision)
        rng = np.random.default_rng(seed)
        gate_rng = np.random.default_rng([seed, 1])
        dropout_rng = np.random.default_rng([seed, 2])
        self.seed = seed
        self.dropout_rng = dropout_rng

        self.source_embedding = Embedding(config.vocab_size, config.d_model, rng)
        self.target_embedding = Embedding(config.vocab_size, config.d_model, rng)
        self.encoder_layers = [
            EncoderLayer(config, rng, gate_rng, dropout_rng, *config.encoder_routing(layer))
            for layer in range(1, config.enc_layers + 1)
        ]
        self.decoder_layers = [
            DecoderLayer(config, rng, dropout_rng, config.decoder_horizontal())
            for _ in range(config.dec_layers)
        ]
        self.encoder_norm = LayerNorm(config.d_model)
        self.decoder_norm = LayerNorm(config.d_model)
        self.output_projection = Linear(config.d_model, config.vocab_size, rng)
        self.positional = sinusoidal_encoding(config.max_len + 1, config.d_model).astype(get_default_dtype())

        logger.info(f"Modell initialisiert: {self.parameter_count()} Parameter, "
                    f"{config.gate_layer_count()} Akzeptanz-Gates, Decoder-Routing={config.decoder_horizontal()}")

    def _check_tokens(self, ids: np.ndarray, limit: int, role: str) -> None:
        if ids.shape[-1] == 0:
            raise InputError(f"Leere {role}-Folge")
        if ids.shape[-1] > limit:
            raise InputError(f"{role}-Folge der Länge {ids.shape[-1]} überschreitet das Maximum {limit}")
        if ids.min() < 0 or ids.max() >= self.config.vocab_size:
            bad = int(ids[(ids < 0) | (ids >= self.config.vocab_size)][0])
            raise InputError(f"Token {bad} liegt außerhalb des Vokabulars (Größe {self.config.vocab_size})")

    def _embed(self, embedding: Embedding, ids: np.ndarray) -> Tensor:
        return embedding(ids) + self.positional[: ids.shape[-1]]

    def encode(self, src: TokenBatch) -> Tensor:
        """
        Kodiert die Quellfolge(n)

        Args:
            src: Token-IDs (L,) oder (B, L); PAD am Ende markiert Polsterung

        Returns:
            Tensor: Speicher (L, d) bzw. (B, L, d)
        """
        ids, single = _as_batch(src)
        self._check_tokens(ids, self.config.max_len, "Quell")
        padding = ids == PAD
        x = self._embed(self.source_embedding, ids)
        for layer in self.encoder_layers:
            x = layer(x, padding_mask=padding)
        memory = self.encoder_norm(x)
        return memory[0] if single else memory

    def decode(self, memory: Tensor, tgt_prefix: TokenBatch, src: Optional[TokenBatch] = None) -> Tensor:
        """
        Berechnet die Vokabular-Logits für jede Position des Zielpräfixes

        Args:
            memory: Ausgabe von encode, (L, d) oder (B, L, d)
            tgt_prefix: Decoder-Eingabe (BOS + Präfix), (T,) oder (B, T)
            src: Optionale Quellfolge zur Maskierung gepolsterter Speicherpositionen

        Returns:
            Tensor: Logits (T, V) bzw. (B, T, V)
        """
        ids, single = _as_batch(tgt_prefix)
        self._check_tokens(ids, self.config.max_len + 1, "Ziel")
        if memory.ndim == 2:
            memory = memory.expand_dims(0)
        source_padding = None
        if src is not None:
            source_padding = _as_batch(src)[0] == PAD
        target_padding = ids == PAD
        x = self._embed(self.target_embedding, ids)
        for layer in self.decoder_layers:
            x = layer(x, memory, target_padding_mask=target_padding, source_padding_mask=source_padding)
        logits = self.output_projection(self.decoder_norm(x))
        return logits[0] if single else logits

    def forward(self, src: TokenBatch, tgt_in: TokenBatch) -> Tensor:
        memory = self.encode(src)
        return self.decode(memory, tgt_in, src)

    def greedy_decode(self, src: TokenBatch, max_len: Optional[int] = None) -> Union[List[int], List[List[int]]]:
        """
        Greedy-Dekodierung bis EOS oder max_len Token

        Args:
            src: Quellfolge (L,) oder Batch (B, L)
            max_len: Optionale kleinere Obergrenze der Ausgabelänge

        Returns:
            Liste von Token-IDs (ohne BOS/EOS) bzw. eine Liste davon für Batches
        """
        ids, single = _as_batch(src)
        limit = self.config.max_len if max_len is None else min(max_len, self.config.max_len)
        was_training = self.training
        self.eval()
        try:
            with no_grad():
                memory = self.encode(ids)
                prefix = np.full((ids.shape[0], 1), BOS, dtype=np.int64)
                finished = np.zeros(ids.shape[0], dtype=bool)
                outputs: List[List[int]] = [[] for _ in range(ids.shape[0])]
                for _ in range(limit):
                    logits = self.decode(memory, prefix, ids)
                    scores = logits.data[:, -1, :].copy()
                    # PAD und BOS sind keine Ausgabetoken
                    scores[:, [PAD, BOS]] = -np.inf
                    next_tokens = np.argmax(scores, axis=-1)
                    for row, token in enumerate(next_tokens):
                        if finished[row]:
                            continue
                        if token == EOS:
                            finished[row] = True
                        else:
                            outputs[row].append(int(token))
                    if finished.all():
                        break
                    next_tokens = np.where(finished, PAD, next_tokens)
                    prefix = np.concatenate([prefix, next_tokens[:, None]], axis=1)
        finally:
            self.train(was_training)
        return outputs[0] if single else outputs

    def encoder_attention(self, src: Sequence[int]) -> np.ndarray:
        """
        Post-Softmax-Gewichte der Encoder-Selbstaufmerksamkeit für eine Quellfolge

        Returns:
            np.ndarray: Gewichte der Form (enc_layers, H, L, L)
        """
        was_training = self.training
        self.eval()
        try:
            with no_grad():
                self.encode(src)
        finally:
            self.train(was_training)
        return np.stack([layer.self_attention.last_attention[0] for layer in self.encoder_layers])


class ModelFactory:
    """
    Factory für Modellvarianten

    Diese Klasse erstellt das Vanilla- oder das Capsule-Modell aus einer gemeinsamen Konfiguration.
    """

    @staticmethod
    def create_model(variant: str = "capsule", config: Optional[ModelConfig] = None, seed: int = 0) -> Seq2SeqModel:
        """
        Erstellt ein Modell

        Args:
            variant: 'vanilla' oder 'capsule'
            config: Modellkonfiguration (optional, Standard: toy)
            seed: Seed für die Initialisierung

        Returns:
            Seq2SeqModel: Modell
        """
        config = config or ModelConfig()
        if variant == "vanilla":
            config = config.as_vanilla()
        elif variant != "capsule":
            raise ConfigurationError(f"Unbekannte Modellvariante: {variant}", key="variant")
        logger.info(f"Erstelle Modellvariante '{variant}' (Seed {seed})")
        return Seq2SeqModel(config, seed)
