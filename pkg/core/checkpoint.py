"""
Checkpoint-Format
Speichert Modellkonfiguration, benannte Parameter und optional den Trainingszustand in einem .npz-Container
"""

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np

from core.model import ModelConfig, Seq2SeqModel
from utils.errors import InputError

# Logger konfigurieren
logger = logging.getLogger("capsule_transformer.checkpoint")

FORMAT_VERSION = 1
FORMAT_KEY = "__format__"
CONFIG_KEY = "__config__"
META_KEY = "__meta__"
PARAM_PREFIX = "param/"
STATE_PREFIX = "state/"


@dataclass
class Checkpoint:
    """
    Inhalt eines geladenen Checkpoints
    """
    config: ModelConfig
    params: Dict[str, np.ndarray]
    state: Dict[str, np.ndarray] = field(default_factory=dict)
    meta: Dict[str, Any] = field(default_factory=dict)

    def build_model(self, seed: int = 0) -> Seq2SeqModel:
        """
        Erstellt ein Modell aus der gespeicherten Konfiguration und lädt die Parameter
        """
        model = Seq2SeqModel(self.config, seed)
        model.load_state_arrays(self.params)
        return model


def save_checkpoint(path: Union[str, Path], model: Seq2SeqModel, state: Optional[Dict[str, np.ndarray]] = None,
                    meta: Optional[Dict[str, Any]] = None) -> Path:
    """
    Schreibt einen Checkpoint atomar (erst temporäre Datei, dann Umbenennung)

    Args:
        path: Zieldatei (.npz)
        model: Modell, dessen Parameter gespeichert werden
        state: Optionale Arrays des Trainingszustands
        meta: Optionale JSON-serialisierbare Zusatzinformationen

    Returns:
        Path: Pfad des geschriebenen Checkpoints
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays: Dict[str, np.ndarray] = {
        FORMAT_KEY: np.array(FORMAT_VERSION),
        CONFIG_KEY: np.array(json.dumps(model.config.to_dict(), sort_keys=True)),
        META_KEY: np.array(json.dumps(meta or {}, sort_keys=True)),
    }
    for name, value in model.state_arrays().items():
        arrays[PARAM_PREFIX + name] = value
    for name, value in (state or {}).items():
        arrays[STATE_PREFIX + name] = np.asarray(value)

    tmp_path = path.with_name(path.name + ".tmp")
    with open(tmp_path, "wb") as handle:
        np.savez(handle, **arrays)
    os.replace(tmp_path, path)
    logger.debug(f"Checkpoint gespeichert: {path} ({len(arrays)} Einträge)")
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """
    Lädt einen Checkpoint

    Args:
        path: Checkpoint-Datei

    Returns:
        Checkpoint: Konfiguration, Parameter, Trainingszustand und Metadaten
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint nicht gefunden: {path}")
    try:
        with np.load(path, allow_pickle=False) as archive:
            contents = {key: archive[key] for key in archive.files}
    except (OSError, ValueError) as e:
        raise InputError(f"Checkpoint {path} ist nicht lesbar: {e}") from e

    if FORMAT_KEY not in contents or CONFIG_KEY not in contents:
        raise InputError(f"{path} ist kein Checkpoint (Schlüssel {FORMAT_KEY}/{CONFIG_KEY} fehlen)")
    version = int(contents[FORMAT_KEY])
    if version != FORMAT_VERSION:
        raise InputError(f"Checkpoint-Version {version} wird nicht unterstützt (erwartet {FORMAT_VERSION})")

    config = ModelConfig.from_dict(json.loads(str(contents[CONFIG_KEY])))
    meta = json.loads(str(contents[META_KEY])) if META_KEY in contents else {}
    params = {key[len(PARAM_PREFIX):]: value for key, value in contents.items() if key.startswith(PARAM_PREFIX)}
    state = {key[len(STATE_PREFIX):]: value for key, value in contents.items() if key.startswith(STATE_PREFIX)}
    logger.debug(f"Checkpoint geladen: {path} ({len(params)} Parameter)")
    return Checkpoint(config=config, params=params, state=state, meta=meta)
