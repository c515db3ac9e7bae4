"""
Gradientenprüfung mit zentralen finiten Differenzen
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Union

import numpy as np

from core.tensor import Tensor, detect_anomaly
from utils.errors import ContractError, NumericError

logger = logging.getLogger("capsule_transformer.gradcheck")


@dataclass
class GradCheckReport:
    """
    Ergebnis einer Gradientenprüfung

    max_rel_error ist der größte normbasierte relative Fehler ||a - n|| / max(||a|| + ||n||, tiny)
    über alle geprüften Eingaben.
    """
    max_rel_error: float
    tolerance: float
    passed: bool
    analytic: List[np.ndarray] = field(default_factory=list)
    numeric: List[np.ndarray] = field(default_factory=list)
    errors: List[float] = field(default_factory=list)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denominator = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), np.finfo(float).tiny)
    return float(np.linalg.norm(analytic - numeric) / denominator)


def numerical_gradient(f: Callable[..., Tensor], inputs: Sequence[np.ndarray], index: int,
                       step: float) -> np.ndarray:
    """
    Berechnet den Gradienten von f nach inputs[index] durch zentrale Differenzen

    Args:
        f: Skalarwertige Tensorfunktion
        inputs: Werte aller Eingaben
        index: Position der Eingabe, nach der abgeleitet wird
        step: Schrittweite

    Returns:
        np.ndarray: Numerischer Gradient in der Form der Eingabe
    """
    base = [np.array(x, dtype=np.float64) for x in inputs]
    grad = np.zeros_like(base[index])
    flat = base[index].reshape(-1)
    flat_grad = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        upper = f(*[Tensor(x) for x in base]).item()
        flat[i] = original - step
        lower = f(*[Tensor(x) for x in base]).item()
        flat[i] = original
        flat_grad[i] = (upper - lower) / (2.0 * step)
    return grad


def grad_check(f: Callable[..., Tensor], x: Union[Tensor, Sequence[Tensor]], step: float = 1e-5,
               tol: float = 1e-4, name: Optional[str] = None) -> GradCheckReport:
    """
    Vergleicht analytische Gradienten mit zentralen finiten Differenzen

    Args:
        f: Skalarwertige Funktion eines oder mehrerer Tensoren
        x: Eingabetensor oder Liste von Eingabetensoren
        step: Schrittweite der finiten Differenzen
        tol: Toleranz für den relativen Fehler
        name: Name der geprüften Funktion für Diagnosen

    Returns:
        GradCheckReport: Bericht mit maximalem relativem Fehler
    """
    name = name or getattr(f, "__name__", "f")
    tensors = [x] if isinstance(x, Tensor) else list(x)
    values = [t.data.astype(np.float64) for t in tensors]

    leaves = [Tensor(v, requires_grad=True) for v in values]
    out = f(*leaves)
    if out.size != 1:
        raise ContractError(f"grad_check: '{name}' muss skalarwertig sein, Form {out.shape}")
    out.backward()
    analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]

    if any(np.isnan(a).any() for a in analytic):
        # Erneut mit Anomalie-Erkennung ausführen, um die erste NaN-Operation zu benennen
        with detect_anomaly():
            retry = [Tensor(v, requires_grad=True) for v in values]
            f(*retry).backward()
        raise NumericError(f"NaN im analytischen Gradienten von '{name}'", op=name)

    numeric = [numerical_gradient(f, values, i, step) for i in range(len(values))]
    if any(np.isnan(n).any() for n in numeric):
        raise NumericError(f"NaN im numerischen Gradienten von '{name}'", op=name)

    errors = [relative_error(a, n) for a, n in zip(analytic, numeric)]
    max_error = max(errors) if errors else 0.0
    passed = max_error <= tol
    logger.debug(f"Gradientenprüfung '{name}': max. relativer Fehler {max_error:.3e} (Toleranz {tol:.1e})")
    return GradCheckReport(max_rel_error=max_error, tolerance=tol, passed=passed,
                           analytic=analytic, numeric=numeric, errors=errors)
