"""
Export der Attention-Gewichte
Schreibt die Post-Softmax-Gewichte der Encoder-Selbstaufmerksamkeit als CSV und vergleicht zwei Exporte
"""

import logging
from pathlib import Path
from typing import List, Union

import numpy as np
import pandas as pd

from core.model import Seq2SeqModel
from utils.errors import DimensionError, InputError

# Logger konfigurieren
logger = logging.getLogger("capsule_transformer.export")

CSV_COLUMNS = ["layer", "head", "query_pos", "key_pos", "weight"]
GROUP_COLUMNS = ["layer", "head", "query_pos"]


def parse_token_line(text: str) -> List[int]:
    """
    Parst eine Eingabe aus leerzeichengetrennten Token-IDs
    """
    try:
        tokens = [int(t) for t in text.split()]
    except ValueError:
        raise InputError(f"Eingabe muss aus ganzzahligen Token-IDs bestehen: '{text}'") from None
    if not tokens:
        raise InputError("Leere Eingabe")
    return tokens


def attention_frame(weights: np.ndarray) -> pd.DataFrame:
    """
    Wandelt Gewichte der Form (layers, H, L, K) in eine Tabelle, gruppiert nach Schicht und Kopf

    Args:
        weights: Post-Softmax-Gewichte

    Returns:
        pd.DataFrame: Spalten layer, head, query_pos, key_pos, weight
    """
    if weights.ndim != 4:
        raise DimensionError("Gewichte benötigen die Form (layers, H, L, K)", weights.shape)
    layer, head, query, key = np.indices(weights.shape).reshape(4, -1)
    return pd.DataFrame({"layer": layer, "head": head, "query_pos": query, "key_pos": key,
                         "weight": weights.reshape(-1)})


def export_attention(model: Seq2SeqModel, tokens: List[int], path: Union[str, Path]) -> pd.DataFrame:
    """
    Exportiert die Encoder-Selbstaufmerksamkeit einer Eingabe als CSV

    Args:
        model: Geladenes Modell
        tokens: Quellfolge (Länge <= max_len)
        path: Ziel-CSV

    Returns:
        pd.DataFrame: Geschriebene Tabelle
    """
    frame = attention_frame(model.encoder_attention(tokens))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.17g")
    logger.info(f"{len(frame)} Attention-Gewichte nach {path} exportiert")
    return frame


def read_attention(path: Union[str, Path]) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Attention-Export nicht gefunden: {path}")
    frame = pd.read_csv(path)
    if list(frame.columns) != CSV_COLUMNS:
        raise InputError(f"{path} hat nicht den Kopf {','.join(CSV_COLUMNS)}", line=1)
    return frame


def row_sums(frame: pd.DataFrame) -> pd.Series:
    return frame.groupby(GROUP_COLUMNS)["weight"].sum()


def attention_divergence(first: pd.DataFrame, second: pd.DataFrame) -> float:
    """
    Mittlere zeilenweise Total-Variation-Distanz zwischen zwei Exporten

    Eine Zeile ist eine (layer, head, query_pos)-Verteilung über key_pos.

    Returns:
        float: Wert in [0, 1]; 0 bei identischen Gewichten
    """
    keys = GROUP_COLUMNS + ["key_pos"]
    merged = first.merge(second, on=keys, how="outer", suffixes=("_a", "_b"), indicator=True)
    if (merged["_merge"] != "both").any():
        raise DimensionError("Exporte haben unterschiedliche Formen", (len(first),), (len(second),))
    merged["diff"] = (merged["weight_a"] - merged["weight_b"]).abs()
    return float(0.5 * merged.groupby(GROUP_COLUMNS)["diff"].sum().mean())
