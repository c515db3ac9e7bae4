"""
Utilities-Modul für gemeinsam genutzte Funktionen des capsule-Transformers
"""

import io
import logging
import os
import typing
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import pandas as pd
from dotenv import dotenv_values, load_dotenv

from utils.errors import ConfigurationError, InputError

# Logger konfigurieren
logger = logging.getLogger("capsule_transformer.utils")

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
LOG_LEVEL_ENV = "CAPSULE_LOG_LEVEL"


def setup_logging(level: Optional[str] = None, log_file: Optional[Union[str, Path]] = None) -> None:
    """
    Konfiguriert das Logging für alle capsule_transformer-Logger

    Args:
        level: Log-Level; ohne Angabe aus CAPSULE_LOG_LEVEL (auch aus .env) oder INFO
        log_file: Optionale Datei, in die zusätzlich geloggt wird
    """
    load_dotenv()
    level = (level or os.getenv(LOG_LEVEL_ENV, "INFO")).upper()
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if log_file is not None:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file, encoding="utf-8"))
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format=LOG_FORMAT, handlers=handlers,
                        force=True)


class ConfigUtils:
    """
    Hilfsfunktionen für Konfigurationsdateien und -werte
    """

    TRUE_VALUES = {"1", "true", "yes", "on", "ja"}
    FALSE_VALUES = {"0", "false", "no", "off", "nein"}

    @staticmethod
    def parse_layer_range(text: str, key: str = "routing_layers") -> Optional[Tuple[int, int]]:
        """
        Parst einen Schichtbereich der Form 'a..b' (oder eine einzelne Schicht 'a')

        Args:
            text: Bereichsangabe; 'all' oder leer bedeutet alle Schichten
            key: Schlüsselname für Fehlermeldungen

        Returns:
            Optional[Tuple[int, int]]: (a, b) oder None
        """
        text = text.strip()
        if text in ("", "all", "none", "None"):
            return None
        parts = text.split("..")
        try:
            if len(parts) == 1:
                first = last = int(parts[0])
            elif len(parts) == 2:
                first, last = int(parts[0]), int(parts[1])
            else:
                raise ValueError(text)
        except ValueError:
            raise ConfigurationError(f"Ungültiger Schichtbereich '{text}' (erwartet 'a..b')", key=key) from None
        return first, last

    @staticmethod
    def parse_value(raw: str, target_type: Any, key: str) -> Any:
        """
        Konvertiert einen Textwert in den Typ eines Dataclass-Feldes

        Args:
            raw: Textwert aus Datei oder Kommandozeile
            target_type: Feldtyp (bool, int, float, str, Optional[...], Tuple[int, int])
            key: Schlüsselname für Fehlermeldungen

        Returns:
            Any: Konvertierter Wert
        """
        origin = typing.get_origin(target_type)
        if origin is Union:
            inner = [arg for arg in typing.get_args(target_type) if arg is not type(None)]
            if raw.strip() in ("", "none", "None"):
                return None
            return ConfigUtils.parse_value(raw, inner[0], key)
        if origin in (tuple, Tuple):
            return ConfigUtils.parse_layer_range(raw, key)

        text = raw.strip()
        try:
            if target_type is bool:
                lowered = text.lower()
                if lowered in ConfigUtils.TRUE_VALUES:
                    return True
                if lowered in ConfigUtils.FALSE_VALUES:
                    return False
                raise ValueError(text)
            if target_type is int:
                return int(text)
            if target_type is float:
                return float(text)
        except ValueError:
            raise ConfigurationError(
                f"Wert '{text}' für '{key}' ist kein gültiger {getattr(target_type, '__name__', target_type)}",
                key=key) from None
        return text

    @staticmethod
    def read_config_file(path: Union[str, Path]) -> Dict[str, Tuple[str, int]]:
        """
        Liest eine Konfigurationsdatei mit Zeilen 'key = value' und '#'-Kommentaren

        Args:
            path: Pfad der Datei

        Returns:
            Dict[str, Tuple[str, int]]: Schlüssel -> (Rohwert, Zeilennummer)
        """
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Konfigurationsdatei nicht gefunden: {path}")
        entries: Dict[str, Tuple[str, int]] = {}
        # Zeilenweise, damit jeder Eintrag seine Zeilennummer behält
        for line, text in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
            stripped = text.strip()
            if not stripped or stripped.startswith("#"):
                continue
            parsed = dotenv_values(stream=io.StringIO(text), interpolate=False)
            if len(parsed) != 1:
                raise InputError(f"Fehlerhafte Konfigurationszeile: {stripped}", line=line)
            key, value = next(iter(parsed.items()))
            if value is None:
                raise InputError(f"Schlüssel '{key}' ohne Wert", line=line)
            entries[key] = (value, line)
        logger.debug(f"{len(entries)} Einträge aus {path} gelesen")
        return entries


class MetricLog:
    """
    Metrik-Log mit einzeiligen key=value-Datensätzen
    """

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def format_record(record: Dict[str, Any]) -> str:
        parts = []
        for key, value in record.items():
            if isinstance(value, float):
                value = repr(value)
            parts.append(f"{key}={value}")
        return " ".join(parts)

    def append(self, **record: Any) -> str:
        line = self.format_record(record)
        with open(self.path, "a", encoding="utf-8") as handle:
            handle.write(line + "\n")
        return line

    @staticmethod
    def read(path: Union[str, Path]) -> pd.DataFrame:
        """
        Liest ein Metrik-Log als DataFrame (eine Zeile pro Datensatz, fehlende Werte als NaN)
        """
        records = []
        with open(path, encoding="utf-8") as handle:
            for line_number, line in enumerate(handle, start=1):
                if not line.strip():
                    continue
                record = {}
                for item in line.split():
                    key, sep, value = item.partition("=")
                    if not sep:
                        raise InputError(f"Eintrag '{item}' ist kein key=value-Paar", line=line_number)
                    record[key] = value
                records.append(record)
        frame = pd.DataFrame.from_records(records)
        for column in frame.columns:
            try:
                frame[column] = pd.to_numeric(frame[column])
            except (ValueError, TypeError):
                pass
        return frame
