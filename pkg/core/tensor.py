"""
Tensor-Modul mit Rückwärts-Autodifferenzierung
Stellt den dichten Tensor-Typ, den Berechnungsgraphen und alle differenzierbaren Operationen bereit
"""

import logging
from abc import ABC, abstractmethod
from contextlib import contextmanager
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from utils.errors import ConfigurationError, ContractError, DimensionError, NumericError

# Logger konfigurieren
logger = logging.getLogger("capsule_transformer.tensor")

# Sentinel für maskierte Logits vor dem Softmax (kein -inf, damit Gradienten endlich bleiben)
MASK_SENTINEL = -1e9

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True
_ANOMALY_DETECTION = False

ArrayLike = Union[np.ndarray, float, int, Sequence[Any]]


def set_default_dtype(dtype: Union[str, type, np.dtype]) -> None:
    """
    Setzt die Standardpräzision für neu erzeugte Tensoren

    Args:
        dtype: 'float64' (Standard) oder 'float32'
    """
    global _DEFAULT_DTYPE
    resolved = np.dtype(dtype)
    if resolved not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ConfigurationError(f"Nicht unterstützte Präzision: {dtype}", key="precision")
    _DEFAULT_DTYPE = resolved.type


def get_default_dtype() -> type:
    return _DEFAULT_DTYPE


@contextmanager
def no_grad() -> Iterator[None]:
    """
    Deaktiviert den Aufbau des Berechnungsgraphen (z. B. für Auswertung und Dekodierung)
    """
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


@contextmanager
def detect_anomaly() -> Iterator[None]:
    """
    Prüft jede Operation im Vorwärts- und Rückwärtsdurchlauf auf NaN/Inf

    Die erste betroffene Operation wird in der NumericError-Meldung genannt.
    """
    global _ANOMALY_DETECTION
    previous = _ANOMALY_DETECTION
    _ANOMALY_DETECTION = True
    try:
        yield
    finally:
        _ANOMALY_DETECTION = previous


class Function(ABC):
    """
    Basisklasse für differenzierbare Operationen

    Unterklassen implementieren forward (auf NumPy-Arrays) und backward, das für jeden
    Eingabetensor den Gradienten (oder None) zurückgibt.
    """

    def __init__(self, *tensors: "Tensor"):
        self.tensors = tensors
        self.released = False

    @property
    def name(self) -> str:
        return type(self).__name__

    @abstractmethod
    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        pass

    @abstractmethod
    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        pass

    @classmethod
    def apply(cls, *tensors: "Tensor", **kwargs: Any) -> "Tensor":
        """
        Erzeugt die Operation, führt den Vorwärtsschritt aus und verknüpft das Ergebnis mit dem Graphen

        Args:
            *tensors: Eingabetensoren
            **kwargs: Zusätzliche Parameter für forward

        Returns:
            Tensor: Ergebnistensor
        """
        func = cls(*tensors)
        out_data = func.forward(*(t.data for t in tensors), **kwargs)

        if _ANOMALY_DETECTION and not np.all(np.isfinite(out_data)):
            raise NumericError(f"Nicht-endliche Werte im Vorwärtsschritt von '{func.name}'", op=func.name)

        requires_grad = _GRAD_ENABLED and any(t.requires_grad for t in tensors)
        return Tensor(out_data, requires_grad=requires_grad, _creator=func if requires_grad else None)

    @staticmethod
    def unbroadcast(grad: np.ndarray, to_shape: Tuple[int, ...]) -> np.ndarray:
        """
        Summiert gebroadcastete Achsen heraus, sodass der Gradient die Zielform hat

        Args:
            grad: Gradient in der gebroadcasteten Form
            to_shape: Form des Eingabetensors

        Returns:
            np.ndarray: Gradient in der Zielform
        """
        if grad.shape == to_shape:
            return grad
        while grad.ndim > len(to_shape):
            grad = grad.sum(axis=0)
        for axis, extent in enumerate(to_shape):
            if extent == 1 and grad.shape[axis] != 1:
                grad = grad.sum(axis=axis, keepdims=True)
        return grad.reshape(to_shape)


class Graph:
    """
    Topologisch geordnete Aufzeichnung der ausgeführten Operationen

    Jeder Knoten erscheint genau einmal; Eingaben stehen vor den Tensoren, die aus ihnen berechnet wurden.
    """

    def __init__(self, nodes: List["Tensor"]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, output: "Tensor") -> "Graph":
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node.creator is not None:
                for parent in node.creator.tensors:
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))
        return cls(order)

    def functions(self) -> List[Function]:
        return [node.creator for node in self.nodes if node.creator is not None]

    def __len__(self) -> int:
        return len(self.nodes)


class Tensor:
    """
    Dichter n-dimensionaler Tensor, der am Rückwärts-Differenzierungsgraphen teilnimmt
    """

    # NumPy-Operatoren an den Tensor delegieren (ndarray + Tensor -> Tensor.__radd__)
    __array_ufunc__ = None

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype: Optional[type] = None,
                 _creator: Optional[Function] = None):
        """
        Initialisiert den Tensor

        Args:
            data: Werte (werden in die Standardpräzision konvertiert)
            requires_grad: Ob Gradienten für diesen Tensor berechnet werden
            dtype: Optionale explizite Präzision
        """
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.creator = _creator

    # Eigenschaften
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # Rückwärtsdurchlauf
    def backward(self) -> None:
        """
        Berechnet die Gradienten aller erreichbaren Tensoren mit requires_grad

        Gradienten von Blättern werden über mehrere backward-Aufrufe akkumuliert.
        Ein Graph kann nur einmal rückwärts durchlaufen werden.
        """
        if self.size != 1:
            raise ContractError(f"backward erwartet einen skalaren Loss, erhalten: Form {self.shape}")
        if not self.requires_grad:
            raise ContractError("Loss ist von keinem Tensor mit requires_grad abhängig")

        graph = Graph.from_output(self)
        for func in graph.functions():
            if func.released:
                raise ContractError("Graph wurde bereits rückwärts durchlaufen; Vorwärtsschritt neu ausführen")

        grads: Dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(graph.nodes):
            grad = grads.pop(id(node), None)
            if grad is None:
                continue
            node.grad = np.array(grad) if node.grad is None else node.grad + grad

            func = node.creator
            if func is None:
                continue
            input_grads = func.backward(grad)
            for parent, parent_grad in zip(func.tensors, input_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                parent_grad = Function.unbroadcast(np.asarray(parent_grad), parent.shape)
                if _ANOMALY_DETECTION and not np.all(np.isfinite(parent_grad)):
                    raise NumericError(f"Nicht-endlicher Gradient im Rückwärtsschritt von '{func.name}'",
                                       op=func.name)
                key = id(parent)
                grads[key] = parent_grad if key not in grads else grads[key] + parent_grad
            func.released = True

    # Operatoren
    def __add__(self, other: Any) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Any) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Any) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Any) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Any) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Any) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: Any) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: Any) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return Neg.apply(self)

    def __pow__(self, exponent: float) -> "Tensor":
        return Power.apply(self, exponent=exponent)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index: Any) -> "Tensor":
        return GetItem.apply(self, index=index)

    # Methoden
    def sum(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: Any) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def expand_dims(self, axis: int) -> "Tensor":
        return Reshape.apply(self, shape=np.expand_dims(self.data, axis).shape)

    def transpose(self, *axes: int) -> "Tensor":
        return Transpose.apply(self, axes=axes or None)

    def swapaxes(self, first: int, second: int) -> "Tensor":
        return swapaxes(self, first, second)

    def exp(self) -> "Tensor":
        return Exp.apply(self)

    def log(self) -> "Tensor":
        return Log.apply(self)

    def sqrt(self) -> "Tensor":
        return Sqrt.apply(self)

    def relu(self) -> "Tensor":
        return Relu.apply(self)


def as_tensor(value: Any) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value, requires_grad=False)


def _broadcast_shape(name: str, *shapes: Tuple[int, ...]) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise DimensionError(f"{name}: Formen nicht broadcast-kompatibel", *shapes) from None


# ---------------------------------------------------------------------------
# Elementweise Operationen
# ---------------------------------------------------------------------------

class Add(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        _broadcast_shape("add", a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return grad, grad


class Sub(Function):
    def forward(self, a, b):
        _broadcast_shape("sub", a.shape, b.shape)
        return a - b

    def backward(self, grad):
        return grad, -grad


class Mul(Function):
    def forward(self, a, b):
        _broadcast_shape("mul", a.shape, b.shape)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return grad * self.b, grad * self.a


class Div(Function):
    def forward(self, a, b):
        _broadcast_shape("div", a.shape, b.shape)
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        return grad / self.b, -grad * self.a / (self.b * self.b)


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class Power(Function):
    def forward(self, a, exponent: float):
        self.a, self.exponent = a, exponent
        return a ** exponent

    def backward(self, grad):
        return (grad * self.exponent * self.a ** (self.exponent - 1),)


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    def forward(self, a):
        self.a = a
        return np.log(a)

    def backward(self, grad):
        return (grad / self.a,)


class Sqrt(Function):
    def forward(self, a):
        self.out = np.sqrt(a)
        return self.out

    def backward(self, grad):
        return (grad / (2.0 * self.out),)


class Relu(Function):
    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, 0.0).astype(a.dtype)

    def backward(self, grad):
        return (grad * self.mask,)


# ---------------------------------------------------------------------------
# Lineare Algebra und Formoperationen
# ---------------------------------------------------------------------------

class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise DimensionError("matmul: innere Dimensionen passen nicht", a.shape, b.shape)
        _broadcast_shape("matmul", a.shape[:-2], b.shape[:-2])
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad):
        grad_a = np.matmul(grad, np.swapaxes(self.b, -1, -2))
        grad_b = np.matmul(np.swapaxes(self.a, -1, -2), grad)
        return grad_a, grad_b


class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.shape = a.shape
        if axis is None:
            self.axis = tuple(range(a.ndim))
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            self.axis = tuple(ax % a.ndim for ax in axes)
        self.keepdims = keepdims
        return np.sum(a, axis=self.axis, keepdims=keepdims)

    def backward(self, grad):
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.shape),)


class L2Norm(Function):
    def forward(self, a, axis=-1, keepdims=False):
        self.a = a
        self.axis = axis % a.ndim
        self.keepdims = keepdims
        self.norm = np.sqrt(np.sum(a * a, axis=self.axis, keepdims=True))
        return self.norm if keepdims else np.squeeze(self.norm, axis=self.axis)

    def backward(self, grad):
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        # Am Nullvektor ist die Norm nicht differenzierbar; dort fließt kein Gradient
        safe = np.where(self.norm > 0, self.norm, 1.0)
        direction = np.where(self.norm > 0, self.a / safe, 0.0)
        return (grad * direction,)


class Reshape(Function):
    def forward(self, a, shape):
        self.shape = a.shape
        try:
            return a.reshape(shape)
        except ValueError:
            raise DimensionError(f"reshape auf {tuple(shape)} nicht möglich", a.shape) from None

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Transpose(Function):
    def forward(self, a, axes=None):
        self.axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(ax % a.ndim for ax in axes)
        return np.transpose(a, self.axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class GetItem(Function):
    def forward(self, a, index):
        self.shape = a.shape
        self.dtype = a.dtype
        self.index = index
        return a[index]

    def backward(self, grad):
        out = np.zeros(self.shape, dtype=self.dtype)
        np.add.at(out, self.index, grad)
        return (out,)


class Concat(Function):
    def forward(self, *arrays, axis=0):
        try:
            out = np.concatenate(arrays, axis=axis)
        except ValueError:
            raise DimensionError("concat: Formen passen nicht", *(arr.shape for arr in arrays)) from None
        self.axis = axis % out.ndim
        self.splits = np.cumsum([arr.shape[self.axis] for arr in arrays])[:-1]
        return out

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=self.axis))


class Stack(Function):
    def forward(self, *arrays, axis=0):
        try:
            out = np.stack(arrays, axis=axis)
        except ValueError:
            raise DimensionError("stack: Formen passen nicht", *(arr.shape for arr in arrays)) from None
        self.axis = axis % out.ndim
        return out

    def backward(self, grad):
        return tuple(np.take(grad, i, axis=self.axis) for i in range(grad.shape[self.axis]))


class MaskedFill(Function):
    def forward(self, a, mask, value):
        if _broadcast_shape("masked_fill", a.shape, mask.shape) != a.shape:
            raise DimensionError("masked_fill: Maske ist nicht auf die Eingabeform broadcastbar", a.shape, mask.shape)
        self.keep = ~mask
        return np.where(mask, np.asarray(value, dtype=a.dtype), a)

    def backward(self, grad):
        return (grad * self.keep,)


# ---------------------------------------------------------------------------
# Softmax
# ---------------------------------------------------------------------------

def _fully_masked(a: np.ndarray) -> np.ndarray:
    return np.all(a <= MASK_SENTINEL / 2, axis=-1, keepdims=True)


class Softmax(Function):
    def forward(self, a):
        if a.ndim == 0 or a.shape[-1] < 1:
            raise DimensionError("softmax: letzte Achse muss mindestens Länge 1 haben", a.shape)
        shifted = a - np.max(a, axis=-1, keepdims=True)
        exps = np.exp(shifted)
        out = exps / np.sum(exps, axis=-1, keepdims=True)
        # Vollständig maskierte Zeilen liefern Nullen statt einer Gleichverteilung
        self.out = np.where(_fully_masked(a), 0.0, out).astype(a.dtype)
        return self.out

    def backward(self, grad):
        y = self.out
        return (y * (grad - np.sum(grad * y, axis=-1, keepdims=True)),)


class LogSoftmax(Function):
    def forward(self, a):
        shifted = a - np.max(a, axis=-1, keepdims=True)
        log_norm = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
        out = shifted - log_norm
        self.probs = np.exp(out)
        return out

    def backward(self, grad):
        return (grad - self.probs * np.sum(grad, axis=-1, keepdims=True),)


# ---------------------------------------------------------------------------
# Funktionale Schnittstelle
# ---------------------------------------------------------------------------

def add(a: Any, b: Any) -> Tensor:
    return Add.apply(as_tensor(a), as_tensor(b))


def sub(a: Any, b: Any) -> Tensor:
    return Sub.apply(as_tensor(a), as_tensor(b))


def mul(a: Any, b: Any) -> Tensor:
    return Mul.apply(as_tensor(a), as_tensor(b))


def div(a: Any, b: Any) -> Tensor:
    return Div.apply(as_tensor(a), as_tensor(b))


def scale(x: Tensor, factor: float) -> Tensor:
    return Mul.apply(as_tensor(x), Tensor(factor))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(as_tensor(a), as_tensor(b))


def exp(x: Tensor) -> Tensor:
    return Exp.apply(as_tensor(x))


def log(x: Tensor) -> Tensor:
    return Log.apply(as_tensor(x))


def sqrt(x: Tensor) -> Tensor:
    return Sqrt.apply(as_tensor(x))


def relu(x: Tensor) -> Tensor:
    return Relu.apply(as_tensor(x))


def reduce_sum(x: Tensor, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> Tensor:
    return Sum.apply(as_tensor(x), axis=axis, keepdims=keepdims)


def mean(x: Tensor, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = range(x.ndim) if axis is None else (axis if isinstance(axis, tuple) else (axis,))
    count = int(np.prod([x.shape[ax] for ax in axes]))
    return scale(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def l2_norm(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    return L2Norm.apply(as_tensor(x), axis=axis, keepdims=keepdims)


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    return Reshape.apply(as_tensor(x), shape=tuple(shape))


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    return Transpose.apply(as_tensor(x), axes=None if axes is None else tuple(axes))


def swapaxes(x: Tensor, first: int, second: int) -> Tensor:
    axes = list(range(x.ndim))
    first, second = first % x.ndim, second % x.ndim
    axes[first], axes[second] = axes[second], axes[first]
    return transpose(x, axes)


def transpose_last_two(x: Tensor) -> Tensor:
    return swapaxes(x, -1, -2)


def concat(tensors: Sequence[Tensor], axis: int = 0, new_axis: bool = False) -> Tensor:
    """
    Verkettet Tensoren entlang einer bestehenden Achse oder stapelt sie entlang einer neuen

    Args:
        tensors: Zu verkettende Tensoren
        axis: Achse
        new_axis: True stapelt entlang einer neuen Achse (Umkehrung: unstack)

    Returns:
        Tensor: Verketteter Tensor
    """
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat benötigt mindestens einen Tensor")
    if new_axis:
        return Stack.apply(*tensors, axis=axis)
    return Concat.apply(*tensors, axis=axis)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat(tensors, axis=axis, new_axis=True)


def split(x: Tensor, sections: Union[int, Sequence[int]], axis: int = 0) -> List[Tensor]:
    """
    Teilt einen Tensor entlang einer Achse (gleich große Teile oder an Indizes)
    """
    axis = axis % x.ndim
    extent = x.shape[axis]
    if isinstance(sections, int):
        if sections <= 0 or extent % sections:
            raise DimensionError(f"split: Achse {axis} nicht in {sections} gleiche Teile teilbar", x.shape)
        width = extent // sections
        bounds = [(i * width, (i + 1) * width) for i in range(sections)]
    else:
        edges = [0, *sections, extent]
        bounds = list(zip(edges[:-1], edges[1:]))
    parts = []
    for start, stop in bounds:
        index = [slice(None)] * x.ndim
        index[axis] = slice(start, stop)
        parts.append(x[tuple(index)])
    return parts


def unstack(x: Tensor, axis: int = 0) -> List[Tensor]:
    axis = axis % x.ndim
    parts = []
    for i in range(x.shape[axis]):
        index = [slice(None)] * x.ndim
        index[axis] = i
        parts.append(x[tuple(index)])
    return parts


def masked_fill(x: Tensor, mask: Union[np.ndarray, Tensor], sentinel: float) -> Tensor:
    """
    Ersetzt maskierte Positionen durch einen Sentinel-Wert; durch sie fließt kein Gradient

    Args:
        x: Eingabetensor
        mask: Boolesche Maske (True = ersetzen), broadcastbar auf die Form von x
        sentinel: MASK_SENTINEL vor dem Softmax oder 0 vor dem Routing

    Returns:
        Tensor: Tensor mit ersetzten Positionen
    """
    mask_array = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    return MaskedFill.apply(as_tensor(x), mask=mask_array.astype(bool), value=sentinel)


def softmax_last_axis(x: Tensor) -> Tensor:
    return Softmax.apply(as_tensor(x))


def log_softmax(x: Tensor) -> Tensor:
    return LogSoftmax.apply(as_tensor(x))


def causal_mask(query_len: int, key_len: Optional[int] = None) -> np.ndarray:
    """
    Vorwärtsmaske: True für alle Schlüsselpositionen nach der Anfrageposition
    """
    key_len = query_len if key_len is None else key_len
    return np.triu(np.ones((query_len, key_len), dtype=bool), k=1)
