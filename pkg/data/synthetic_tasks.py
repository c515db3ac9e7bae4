"""
Synthetische Sequenzaufgaben
Erzeugt reproduzierbare Datensätze für Kopieren, Umkehren und Sortieren und liest/schreibt sie als TSV
"""

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from core.model import BOS, EOS, FIRST_CONTENT_ID, PAD
from utils.errors import ConfigurationError, InputError

# Logger konfigurieren
logger = logging.getLogger("capsule_transformer.data")

TASK_KINDS = ("copy", "reverse", "sort")

Batch = Tuple[np.ndarray, np.ndarray, np.ndarray]


@dataclass
class SyntheticTask:
    """
    Beschreibung einer synthetischen Aufgabe

    Inhaltstoken stammen aus FIRST_CONTENT_ID..vocab_size-1; distinct verlangt paarweise
    verschiedene Token innerhalb einer Quellfolge.
    """
    kind: str = "copy"
    vocab_size: int = 32
    min_length: int = 1
    max_length: int = 10
    sample_count: int = 2000
    seed: int = 0
    distinct: bool = False

    @property
    def content_size(self) -> int:
        return self.vocab_size - FIRST_CONTENT_ID

    def validate(self, max_len: Optional[int] = None) -> "SyntheticTask":
        if self.kind not in TASK_KINDS:
            raise ConfigurationError(f"Unbekannte Aufgabe: {self.kind} (erlaubt: {', '.join(TASK_KINDS)})", key="task")
        if not 1 <= self.min_length <= self.max_length:
            raise ConfigurationError(
                f"Ungültiger Längenbereich {self.min_length}..{self.max_length}", key="min_length")
        if max_len is not None and self.max_length > max_len:
            raise ConfigurationError(
                f"max_length {self.max_length} überschreitet die Modellgrenze max_len={max_len}", key="max_length")
        if self.sample_count < 1:
            raise ConfigurationError("sample_count muss mindestens 1 sein", key="sample_count")
        if self.content_size < 1:
            raise ConfigurationError(
                f"Vokabular der Größe {self.vocab_size} enthält keine Inhaltstoken", key="vocab_size")
        if self.distinct and self.content_size < self.max_length:
            raise ConfigurationError(
                f"Vokabular mit {self.content_size} Inhaltstoken reicht nicht für {self.max_length} "
                f"verschiedene Token pro Folge", key="vocab_size")
        return self

    def derive(self, sample_count: int, offset: int) -> "SyntheticTask":
        """
        Variante mit eigenem Seed, z. B. für den Validierungsdatensatz
        """
        return replace(self, sample_count=sample_count, seed=self.seed + offset)


def target_for(kind: str, source: List[int]) -> List[int]:
    if kind == "copy":
        return list(source)
    if kind == "reverse":
        return list(reversed(source))
    if kind == "sort":
        return sorted(source)
    raise ConfigurationError(f"Unbekannte Aufgabe: {kind}", key="task")


@dataclass
class SequenceDataset:
    """
    Paare aus Quell- und Zielfolgen
    """
    sources: List[List[int]] = field(default_factory=list)
    targets: List[List[int]] = field(default_factory=list)

    def __post_init__(self):
        if len(self.sources) != len(self.targets):
            raise InputError(f"{len(self.sources)} Quellen, aber {len(self.targets)} Ziele")

    def __len__(self) -> int:
        return len(self.sources)

    def __iter__(self) -> Iterator[Tuple[List[int], List[int]]]:
        return iter(zip(self.sources, self.targets))

    def subset(self, indices: np.ndarray) -> "SequenceDataset":
        return SequenceDataset([self.sources[i] for i in indices], [self.targets[i] for i in indices])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "src": [" ".join(map(str, seq)) for seq in self.sources],
            "tgt": [" ".join(map(str, seq)) for seq in self.targets],
        })

    def batches(self, batch_size: int, rng: Optional[np.random.Generator] = None) -> Iterator[Batch]:
        """
        Liefert gepolsterte Batches (src, tgt_in, tgt_out) für Teacher Forcing

        tgt_in beginnt mit BOS, tgt_out endet mit EOS; beide sind mit PAD gepolstert.

        Args:
            batch_size: Beispiele pro Batch
            rng: Optionaler Zufallsgenerator zum Mischen

        Returns:
            Iterator[Batch]: Batches in Reihenfolge des Datensatzes oder gemischt
        """
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(order), batch_size):
            chosen = order[start:start + batch_size]
            yield make_batch([self.sources[i] for i in chosen], [self.targets[i] for i in chosen])


def _pad(rows: List[List[int]]) -> np.ndarray:
    width = max(len(row) for row in rows)
    array = np.full((len(rows), width), PAD, dtype=np.int64)
    for i, row in enumerate(rows):
        array[i, : len(row)] = row
    return array


def make_batch(sources: List[List[int]], targets: List[List[int]]) -> Batch:
    src = _pad(sources)
    tgt_in = _pad([[BOS] + list(t) for t in targets])
    tgt_out = _pad([list(t) + [EOS] for t in targets])
    return src, tgt_in, tgt_out


def generate(task: SyntheticTask) -> SequenceDataset:
    """
    Erzeugt einen Datensatz deterministisch aus dem Seed der Aufgabe

    Args:
        task: Aufgabenbeschreibung

    Returns:
        SequenceDataset: Paare (src, tgt)
    """
    task.validate()
    rng = np.random.default_rng(task.seed)
    content = np.arange(FIRST_CONTENT_ID, task.vocab_size)
    sources, targets = [], []
    for _ in range(task.sample_count):
        length = int(rng.integers(task.min_length, task.max_length + 1))
        if task.distinct:
            source = rng.choice(content, size=length, replace=False)
        else:
            source = rng.integers(FIRST_CONTENT_ID, task.vocab_size, size=length)
        source = [int(t) for t in source]
        sources.append(source)
        targets.append(target_for(task.kind, source))
    logger.info(f"Aufgabe '{task.kind}' erzeugt: {task.sample_count} Beispiele, "
                f"Längen {task.min_length}..{task.max_length}, Seed {task.seed}")
    return SequenceDataset(sources, targets)


def write_tsv(dataset: SequenceDataset, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dataset.to_frame().to_csv(path, sep="\t", header=False, index=False)
    return path


def _parse_tokens(text: str, line: int, vocab_size: Optional[int]) -> List[int]:
    try:
        tokens = [int(t) for t in text.split()]
    except ValueError:
        raise InputError(f"Token-IDs müssen Ganzzahlen sein: '{text}'", line=line) from None
    if vocab_size is not None:
        for token in tokens:
            if not 0 <= token < vocab_size:
                raise InputError(f"Token {token} liegt außerhalb des Vokabulars (Größe {vocab_size})", line=line)
    return tokens


def read_tsv(path: Union[str, Path], vocab_size: Optional[int] = None) -> SequenceDataset:
    """
    Liest einen Datensatz im Format `src<TAB>tgt` (leerzeichengetrennte Token-IDs)

    Args:
        path: TSV-Datei
        vocab_size: Optionale Vokabulargröße zur Prüfung der Token

    Returns:
        SequenceDataset: Gelesener Datensatz
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Datensatz nicht gefunden: {path}")

    sources, targets = [], []
    # Zeilennummern beziehen sich auf die Datei, Leerzeilen eingeschlossen
    for line, text in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not text.strip():
            continue
        src, separator, tgt = text.partition("\t")
        if not separator:
            raise InputError("Trennzeichen TAB zwischen Quelle und Ziel fehlt", line=line)
        if "\t" in tgt:
            raise InputError("Zu viele Spalten, erwartet: src<TAB>tgt", line=line)
        source = _parse_tokens(src, line, vocab_size)
        if not source:
            raise InputError("Leere Quellfolge", line=line)
        sources.append(source)
        targets.append(_parse_tokens(tgt, line, vocab_size))
    if not sources:
        raise InputError(f"Datensatz {path} ist leer")
    logger.debug(f"{len(sources)} Beispiele aus {path} gelesen")
    return SequenceDataset(sources, targets)
