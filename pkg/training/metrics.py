"""
Verlust und Auswertungsmetriken
Kreuzentropie mit PAD-Maskierung, Token- und Sequenzgenauigkeit sowie korpusweiter BLEU-Score
"""

import logging
from typing import Dict, List, Sequence

import numpy as np
from sacrebleu.metrics import BLEU

from core.model import PAD, Seq2SeqModel
from core.tensor import Tensor, log_softmax, reduce_sum
from data.synthetic_tasks import SequenceDataset
from utils.errors import DimensionError, InputError

# Logger konfigurieren
logger = logging.getLogger("capsule_transformer.metrics")


def cross_entropy(logits: Tensor, targets: np.ndarray, pad_id: int = PAD, label_smoothing: float = 0.0) -> Tensor:
    """
    Mittlere Kreuzentropie über alle Nicht-PAD-Positionen

    Args:
        logits: Vokabular-Logits (..., T, V)
        targets: Ziel-IDs (..., T)
        pad_id: Ignorierte Token-ID
        label_smoothing: Optionale Glättung; die Zielverteilung ist (1 - eps) * one_hot + eps / V

    Returns:
        Tensor: Skalarer Verlust
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise DimensionError("Logits und Ziele passen nicht zusammen", logits.shape, targets.shape)
    vocab = logits.shape[-1]
    keep = targets != pad_id
    count = int(keep.sum())
    if count == 0:
        raise InputError("Keine Nicht-PAD-Ziele im Batch")

    distribution = np.eye(vocab)[targets]
    if label_smoothing > 0.0:
        distribution = (1.0 - label_smoothing) * distribution + label_smoothing / vocab
    per_token = -reduce_sum(log_softmax(logits) * distribution, axis=-1)
    return reduce_sum(per_token * keep) / count


def teacher_forced_accuracy(logits: Tensor, targets: np.ndarray, pad_id: int = PAD) -> float:
    keep = np.asarray(targets) != pad_id
    predictions = np.argmax(logits.data, axis=-1)
    return float(((predictions == targets) & keep).sum() / max(int(keep.sum()), 1))


def token_accuracy(hypotheses: Sequence[Sequence[int]], references: Sequence[Sequence[int]]) -> float:
    """
    Anteil der Referenzpositionen, an denen die Hypothese dasselbe Token enthält
    """
    _check_corpus(hypotheses, references)
    total = sum(len(ref) for ref in references)
    if total == 0:
        return 1.0
    correct = sum(sum(1 for h, r in zip(hyp, ref) if h == r) for hyp, ref in zip(hypotheses, references))
    return correct / total


def sequence_accuracy(hypotheses: Sequence[Sequence[int]], references: Sequence[Sequence[int]]) -> float:
    _check_corpus(hypotheses, references)
    return sum(1 for hyp, ref in zip(hypotheses, references) if list(hyp) == list(ref)) / len(references)


def _check_corpus(hypotheses: Sequence, references: Sequence) -> None:
    if len(references) == 0:
        raise InputError("Leerer Korpus")
    if len(hypotheses) != len(references):
        raise InputError(f"{len(hypotheses)} Hypothesen, aber {len(references)} Referenzen")


def bleu(hypotheses: Sequence[Sequence], references: Sequence[Sequence], max_n: int = 4) -> float:
    """
    Korpusweiter, ungeglätteter BLEU-Score mit Groß-/Kleinschreibung

    Token werden exakt verglichen (keine weitere Tokenisierung).

    Args:
        hypotheses: Hypothesen als Token-Folgen
        references: Je eine Referenz pro Hypothese
        max_n: Höchste N-Gramm-Ordnung

    Returns:
        float: Score in [0, 100]
    """
    _check_corpus(hypotheses, references)
    metric = BLEU(tokenize="none", smooth_method="none", max_ngram_order=max_n, force=True)
    hyp_lines = [" ".join(str(t) for t in hyp) for hyp in hypotheses]
    ref_lines = [" ".join(str(t) for t in ref) for ref in references]
    return float(metric.corpus_score(hyp_lines, [ref_lines]).score)


def evaluate(model: Seq2SeqModel, dataset: SequenceDataset, batch_size: int = 64) -> Dict[str, float]:
    """
    Wertet ein Modell mit Greedy-Dekodierung aus

    Args:
        model: Modell
        dataset: Datensatz
        batch_size: Beispiele pro Dekodier-Batch

    Returns:
        Dict[str, float]: token_accuracy, sequence_accuracy und bleu
    """
    hypotheses: List[List[int]] = []
    for start in range(0, len(dataset), batch_size):
        hypotheses.extend(model.greedy_decode(dataset.sources[start:start + batch_size]))
    references = dataset.targets
    metrics = {
        "token_accuracy": token_accuracy(hypotheses, references),
        "sequence_accuracy": sequence_accuracy(hypotheses, references),
        "bleu": bleu(hypotheses, references),
    }
    logger.info(f"Auswertung auf {len(dataset)} Beispielen: " +
                ", ".join(f"{key}={value:.4f}" for key, value in metrics.items()))
    return metrics
