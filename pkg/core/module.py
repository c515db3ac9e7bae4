"""
Abstrakte Basisklasse für Modellbausteine
Definiert die Parameterverwaltung für alle Schichten des capsule-Transformers
"""

import logging
from abc import ABC, abstractmethod
from typing import Any, Dict, Iterator, List, Tuple

import numpy as np

from core.tensor import Tensor
from utils.errors import ConfigurationError, DimensionError

# Logger konfigurieren
logger = logging.getLogger("capsule_transformer.module")


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    """
    Erzeugt eine trainierbare Matrix mit Xavier-Gleichverteilung

    Args:
        rng: Zufallsgenerator
        fan_in: Eingabebreite
        fan_out: Ausgabebreite

    Returns:
        Tensor: Parameter der Form (fan_in, fan_out)
    """
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)), requires_grad=True)


def zeros_parameter(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones_parameter(*shape: int) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


class Module(ABC):
    """
    Abstrakte Basisklasse für Schichten und Modelle

    Parameter sind alle Attribute vom Typ Tensor mit requires_grad (auch in Listen) sowie die
    Parameter verschachtelter Module; die Reihenfolge folgt der Attributdefinition.
    """

    training = True

    @abstractmethod
    def forward(self, *args: Any, **kwargs: Any) -> Any:
        pass

    def __call__(self, *args: Any, **kwargs: Any) -> Any:
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[Tuple[str, Any]]:
        for name, value in vars(self).items():
            if isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    yield f"{name}.{i}", item
            else:
                yield name, value

    def named_parameters(self, prefix: str = "") -> Dict[str, Tensor]:
        """
        Gibt alle trainierbaren Parameter mit hierarchischen Namen zurück

        Returns:
            Dict[str, Tensor]: Name -> Parameter
        """
        params: Dict[str, Tensor] = {}
        for name, value in self._children():
            if isinstance(value, Tensor) and value.requires_grad:
                params[f"{prefix}{name}"] = value
            elif isinstance(value, Module):
                params.update(value.named_parameters(f"{prefix}{name}."))
        return params

    def parameters(self) -> List[Tensor]:
        return list(self.named_parameters().values())

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.grad = None

    def train(self, mode: bool = True) -> "Module":
        for module in self.modules():
            module.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {name: param.data.copy() for name, param in self.named_parameters().items()}

    def load_state_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        """
        Lädt Parameterwerte aus einem Dictionary

        Args:
            arrays: Name -> Werte; muss exakt die Parameter dieses Moduls abdecken
        """
        params = self.named_parameters()
        missing = sorted(set(params) - set(arrays))
        unexpected = sorted(set(arrays) - set(params))
        if missing or unexpected:
            raise ConfigurationError(
                f"Parameter passen nicht zum Modell (fehlend: {missing[:5]}, unerwartet: {unexpected[:5]})")
        for name, param in params.items():
            value = np.asarray(arrays[name])
            if value.shape != param.shape:
                raise DimensionError(f"Parameter '{name}' hat falsche Form", param.shape, value.shape)
            param.data = value.astype(param.data.dtype)
        logger.debug(f"{len(params)} Parameter geladen")


class Dropout(Module):
    """
    Dropout mit gemeinsam genutztem Zufallsgenerator des Modells
    """

    def __init__(self, rate: float, rng: np.random.Generator):
        self.rate = rate
        self.rng = rng

    def forward(self, x: Tensor) -> Tensor:
        if not self.training or self.rate <= 0.0:
            return x
        keep = (self.rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * Tensor(keep)
