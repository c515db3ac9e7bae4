"""
Fehlerklassen und Fehlerbehandlung für den capsule-Transformer
"""

from typing import Optional, Tuple

EXIT_SUCCESS = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2


class CapsuleTransformerError(Exception):
    """
    Basisklasse aller projektspezifischen Fehler
    """


class DimensionError(CapsuleTransformerError):
    """
    Formfehler bei Tensoroperationen
    """

    def __init__(self, message: str, *shapes: Tuple[int, ...]):
        if shapes:
            message = f"{message} (Formen: {', '.join(str(tuple(s)) for s in shapes)})"
        super().__init__(message)
        self.shapes = shapes


class ContractError(CapsuleTransformerError):
    """
    Verletzte Vor- oder Nachbedingung einer Operation
    """


class ConfigurationError(CapsuleTransformerError):
    """
    Ungültige Konfiguration (Schlüssel, Werte, Flag-Kombinationen)
    """

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message)
        self.key = key


class InputError(CapsuleTransformerError):
    """
    Ungültige Eingabedaten (Token, Dateien, Korpora)
    """

    def __init__(self, message: str, line: Optional[int] = None):
        if line is not None:
            message = f"Zeile {line}: {message}"
        super().__init__(message)
        self.line = line


class NumericError(CapsuleTransformerError):
    """
    Nicht-endliche Werte (NaN/Inf) während der Berechnung
    """

    def __init__(self, message: str, op: Optional[str] = None):
        super().__init__(message)
        self.op = op


def handle_error(error: BaseException) -> Tuple[str, int]:
    """
    Verarbeitet Ausnahmen und gibt eine benutzerfreundliche Nachricht samt Exit-Code zurück

    Args:
        error: Die aufgetretene Ausnahme

    Returns:
        Tuple[str, int]: Meldung und Exit-Code (1 Nutzung/Konfiguration, 2 numerischer Fehler)
    """
    if isinstance(error, NumericError):
        op = f" (Operation: {error.op})" if error.op else ""
        return f"Numerischer Fehler{op}: {error}", EXIT_NUMERIC
    if isinstance(error, ConfigurationError):
        key = f" [Schlüssel: {error.key}]" if error.key else ""
        return f"Konfigurationsfehler{key}: {error}", EXIT_USAGE
    if isinstance(error, InputError):
        return f"Eingabefehler: {error}", EXIT_USAGE
    if isinstance(error, (ContractError, DimensionError)):
        return f"Ungültiger Aufruf: {error}", EXIT_USAGE
    if isinstance(error, FileNotFoundError):
        return f"Datei nicht gefunden: {error.filename or error}", EXIT_USAGE
    # Allgemeine Fehlermeldung für unbekannte Fehler
    return f"Ein Fehler ist aufgetreten: {error}", EXIT_NUMERIC if isinstance(error, FloatingPointError) else EXIT_USAGE
