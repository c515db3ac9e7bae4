"""
Trainings-Engine für den capsule-Transformer
Verantwortlich für Teacher-Forcing-Training, Validierung, Checkpoints und Trainingsberichte
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from core.checkpoint import load_checkpoint, save_checkpoint
from core.model import Seq2SeqModel
from core.tensor import Tensor, detect_anomaly
from data.synthetic_tasks import Batch, SequenceDataset, make_batch
from training.metrics import cross_entropy, evaluate, teacher_forced_accuracy
from utils.errors import ConfigurationError, ContractError, NumericError
from utils.helpers import MetricLog

# Logger konfigurieren
logger = logging.getLogger("capsule_transformer.training")

BEST_CHECKPOINT = "best.npz"
LAST_CHECKPOINT = "last.npz"
METRIC_LOG = "metrics.log"
LOSS_PLOT = "loss.png"


@dataclass
class TrainConfig:
    """
    Hyperparameter des Trainings

    Lernrate: lr_factor * d^-0.5 * min(step^-0.5, step * warmup^-1.5); Adam mit (beta1, beta2, adam_eps).
    """
    steps: int = 1000
    batch_size: int = 32
    lr_factor: float = 1.0
    warmup: int = 400
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    grad_accum: int = 1
    label_smoothing: float = 0.0
    eval_every: int = 200
    valid_samples: int = 200
    log_every: int = 50
    seed: int = 0

    def validate(self) -> "TrainConfig":
        for key in ("steps", "batch_size", "warmup", "grad_accum", "eval_every", "valid_samples", "log_every"):
            if getattr(self, key) < 1:
                raise ConfigurationError(f"{key} muss mindestens 1 sein, erhalten: {getattr(self, key)}", key=key)
        if self.lr_factor <= 0.0:
            raise ConfigurationError("lr_factor muss positiv sein", key="lr_factor")
        for key in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, key) < 1.0:
                raise ConfigurationError(f"{key} muss in [0, 1) liegen", key=key)
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigurationError("label_smoothing muss in [0, 1) liegen", key="label_smoothing")
        return self

    @classmethod
    def from_preset(cls, name: str, **overrides: Any) -> "TrainConfig":
        if name not in TRAIN_PRESETS:
            raise ConfigurationError(f"Unbekanntes Preset: {name}", key="preset")
        return cls(**{**TRAIN_PRESETS[name], **overrides})

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{key: value for key, value in data.items() if key in known})


TRAIN_PRESETS: Dict[str, Dict[str, Any]] = {
    "toy": {},
    "base": {"grad_accum": 12, "warmup": 4000, "label_smoothing": 0.1, "steps": 100000},
    "big": {"grad_accum": 24, "warmup": 4000, "label_smoothing": 0.1, "steps": 300000},
}


def noam_rate(step: int, d_model: int, factor: float = 1.0, warmup: int = 400) -> float:
    """
    Lernrate mit linearem Warmup und anschließendem Abfall mit 1/sqrt(step)
    """
    step = max(step, 1)
    return factor * d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


def _rng_state(rng: np.random.Generator) -> str:
    return json.dumps(rng.bit_generator.state)


def _restore_rng(rng: np.random.Generator, state: str) -> None:
    rng.bit_generator.state = json.loads(state)


class Adam:
    """
    Adam-Optimierer mit Bias-Korrektur über benannte Parameter
    """

    def __init__(self, params: Dict[str, Tensor], beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-9):
        self.params = params
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for name, param in self.params.items():
            if param.grad is None:
                continue
            grad = param.grad
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * grad
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * grad * grad
            m_hat = self.m[name] / correction1
            v_hat = self.v[name] / correction2
            param.data = param.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.grad = None

    def state_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {"adam_t": np.array(self.t)}
        arrays.update({f"adam_m/{name}": value for name, value in self.m.items()})
        arrays.update({f"adam_v/{name}": value for name, value in self.v.items()})
        return arrays

    def load_state_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        self.t = int(arrays["adam_t"])
        for name in self.params:
            self.m[name] = np.array(arrays[f"adam_m/{name}"])
            self.v[name] = np.array(arrays[f"adam_v/{name}"])


@dataclass
class TrainState:
    """
    Fortsetzbarer Trainingszustand

    Enthält neben Schrittzähler und bestem Validierungswert die Zustände der Zufallsgeneratoren
    für Batch-Auswahl und Dropout, sodass eine Wiederaufnahme dieselbe Trajektorie fortsetzt.
    """
    step: int = 0
    best_metric: float = -math.inf
    best_step: int = 0
    loss_history: List[float] = field(default_factory=list)
    data_rng_state: Optional[str] = None
    dropout_rng_state: Optional[str] = None
    optimizer: Dict[str, np.ndarray] = field(default_factory=dict)

    def to_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {
            "step": np.array(self.step),
            "best_metric": np.array(self.best_metric),
            "best_step": np.array(self.best_step),
            "loss_history": np.array(self.loss_history, dtype=np.float64),
            "data_rng": np.array(self.data_rng_state or ""),
            "dropout_rng": np.array(self.dropout_rng_state or ""),
        }
        arrays.update(self.optimizer)
        return arrays

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray]) -> "TrainState":
        if "step" not in arrays:
            raise ContractError("Checkpoint enthält keinen Trainingszustand")
        scalar_keys = {"step", "best_metric", "best_step", "loss_history", "data_rng", "dropout_rng"}
        return cls(
            step=int(arrays["step"]),
            best_metric=float(arrays["best_metric"]),
            best_step=int(arrays["best_step"]),
            loss_history=[float(v) for v in np.asarray(arrays["loss_history"]).reshape(-1)],
            data_rng_state=str(arrays["data_rng"]) or None,
            dropout_rng_state=str(arrays["dropout_rng"]) or None,
            optimizer={key: value for key, value in arrays.items() if key not in scalar_keys},
        )


class TrainEngine:
    """
    Engine zum Trainieren eines Modells mit Teacher Forcing auf einem Datensatz
    """

    def __init__(self, model: Seq2SeqModel, config: Optional[TrainConfig] = None,
                 out_dir: Optional[Union[str, Path]] = None, valid_dataset: Optional[SequenceDataset] = None):
        """
        Initialisiert die Trainings-Engine

        Args:
            model: Zu trainierendes Modell
            config: Trainingshyperparameter
            out_dir: Optionales Ausgabeverzeichnis für Checkpoints, Metrik-Log und Grafik
            valid_dataset: Optionaler Validierungsdatensatz
        """
        self.model = model
        self.config = (config or TrainConfig()).validate()
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.valid_dataset = valid_dataset
        self.metric_log = MetricLog(self.out_dir / METRIC_LOG) if self.out_dir is not None else None
        self.reset()

    def reset(self):
        """
        Setzt die Engine auf den Anfangszustand zurück
        """
        self.state = TrainState()
        self.optimizer = Adam(self.model.named_parameters(), self.config.beta1, self.config.beta2,
                              self.config.adam_eps)
        self.data_rng = np.random.default_rng([self.config.seed, 3])
        self.validation_history: List[Dict[str, float]] = []

    def learning_rate(self, step: int) -> float:
        return noam_rate(step, self.model.config.d_model, self.config.lr_factor, self.config.warmup)

    # Zustand
    def capture_state(self) -> TrainState:
        self.state.data_rng_state = _rng_state(self.data_rng)
        self.state.dropout_rng_state = _rng_state(self.model.dropout_rng)
        self.state.optimizer = self.optimizer.state_arrays()
        return self.state

    def restore_state(self, state: TrainState) -> None:
        """
        Übernimmt einen gespeicherten Trainingszustand (Optimierer-Momente und Zufallsgeneratoren)
        """
        self.state = state
        if state.optimizer:
            self.optimizer.load_state_arrays(state.optimizer)
        if state.data_rng_state:
            _restore_rng(self.data_rng, state.data_rng_state)
        if state.dropout_rng_state:
            _restore_rng(self.model.dropout_rng, state.dropout_rng_state)
        logger.info(f"Trainingszustand wiederhergestellt bei Schritt {state.step}")

    @classmethod
    def resume(cls, checkpoint_path: Union[str, Path], config: Optional[TrainConfig] = None,
               out_dir: Optional[Union[str, Path]] = None,
               valid_dataset: Optional[SequenceDataset] = None) -> "TrainEngine":
        """
        Erstellt eine Engine aus einem Checkpoint mit Trainingszustand
        """
        checkpoint = load_checkpoint(checkpoint_path)
        if config is None and "train_config" in checkpoint.meta:
            config = TrainConfig.from_dict(checkpoint.meta["train_config"])
        model = checkpoint.build_model(seed=int(checkpoint.meta.get("seed", 0)))
        engine = cls(model, config, out_dir, valid_dataset)
        engine.restore_state(TrainState.from_arrays(checkpoint.state))
        return engine

    def save(self, name: str, metrics: Optional[Dict[str, float]] = None) -> Optional[Path]:
        if self.out_dir is None:
            return None
        meta = {"seed": self.model.seed, "train_config": self.config.to_dict(), "metrics": metrics or {}}
        return save_checkpoint(self.out_dir / name, self.model, self.capture_state().to_arrays(), meta)

    # Training
    def sample_batch(self, dataset: SequenceDataset) -> Batch:
        size = min(self.config.batch_size, len(dataset))
        chosen = self.data_rng.choice(len(dataset), size=size, replace=False)
        return make_batch([dataset.sources[i] for i in chosen], [dataset.targets[i] for i in chosen])

    def compute_loss(self, batch: Batch) -> Tensor:
        src, tgt_in, tgt_out = batch
        logits = self.model(src, tgt_in)
        return cross_entropy(logits, tgt_out, label_smoothing=self.config.label_smoothing)

    def _diagnose_nan(self, batch: Batch) -> NumericError:
        try:
            with detect_anomaly():
                self.compute_loss(batch).backward()
        except NumericError as e:
            return NumericError(f"NaN im Verlust bei Schritt {self.state.step + 1}: {e}", op=e.op)
        return NumericError(f"NaN im Verlust bei Schritt {self.state.step + 1}; keine Operation identifiziert")

    def train_step(self, dataset: SequenceDataset) -> float:
        """
        Führt einen Optimierungsschritt mit grad_accum Teil-Batches aus

        Returns:
            float: Mittlerer Verlust über die Teil-Batches
        """
        self.model.train()
        self.optimizer.zero_grad()
        total = 0.0
        for _ in range(self.config.grad_accum):
            batch = self.sample_batch(dataset)
            loss = self.compute_loss(batch)
            if not np.isfinite(loss.item()):
                raise self._diagnose_nan(batch)
            (loss / self.config.grad_accum).backward()
            total += loss.item()

        self.state.step += 1
        self.optimizer.step(self.learning_rate(self.state.step))
        mean_loss = total / self.config.grad_accum
        self.state.loss_history.append(mean_loss)
        return mean_loss

    def validate(self) -> Dict[str, float]:
        metrics = evaluate(self.model, self.valid_dataset)
        metrics["step"] = self.state.step
        self.validation_history.append(metrics)
        if self.metric_log is not None:
            self.metric_log.append(kind="valid", **metrics)

        if metrics["token_accuracy"] > self.state.best_metric:
            self.state.best_metric = metrics["token_accuracy"]
            self.state.best_step = self.state.step
            self.save(BEST_CHECKPOINT, metrics)
            logger.info(f"Neuer bester Checkpoint bei Schritt {self.state.step}: "
                        f"token_accuracy={metrics['token_accuracy']:.4f}")
        self.save(LAST_CHECKPOINT, metrics)
        return metrics

    def run(self, dataset: SequenceDataset, steps: Optional[int] = None, verbose: bool = False) -> TrainState:
        """
        Trainiert bis zur Gesamtschrittzahl

        Args:
            dataset: Trainingsdatensatz
            steps: Optionale Gesamtschrittzahl (Standard: config.steps); bei Wiederaufnahme wird fortgesetzt
            verbose: Ob jeder Log-Schritt auf INFO statt DEBUG ausgegeben wird

        Returns:
            TrainState: Zustand nach dem Training
        """
        if len(dataset) == 0:
            raise ContractError("Leerer Trainingsdatensatz")
        target = steps if steps is not None else self.config.steps
        log = logger.info if verbose else logger.debug
        logger.info(f"Starte Training: Schritte {self.state.step + 1}..{target}, "
                    f"Batch {self.config.batch_size} x {self.config.grad_accum}")

        while self.state.step < target:
            loss = self.train_step(dataset)
            step = self.state.step
            if step % self.config.log_every == 0 or step == target:
                lr = self.learning_rate(step)
                log(f"Schritt {step}: loss={loss:.6f}, lr={lr:.3e}")
                if self.metric_log is not None:
                    self.metric_log.append(kind="train", step=step, loss=loss, lr=lr)
            if self.valid_dataset is not None and (step % self.config.eval_every == 0 or step == target):
                self.validate()

        if self.valid_dataset is None:
            self.save(LAST_CHECKPOINT)
        logger.info(f"Training beendet nach {self.state.step} Schritten, letzter Verlust "
                    f"{self.state.loss_history[-1]:.6f}" if self.state.loss_history else "Training ohne Schritte beendet")
        return self.capture_state()

    # Bericht
    def loss_series(self) -> pd.Series:
        return pd.Series(self.state.loss_history, index=pd.RangeIndex(1, len(self.state.loss_history) + 1,
                                                                      name="step"), name="loss")

    def batch_accuracy(self, batch: Batch) -> float:
        src, tgt_in, tgt_out = batch
        self.model.eval()
        try:
            return teacher_forced_accuracy(self.model(src, tgt_in), tgt_out)
        finally:
            self.model.train()

    def plot_results(self, save_path: Optional[Union[str, Path]] = None, window: int = 20) -> Optional[Path]:
        """
        Zeichnet die Verlustkurve (roh und gleitender Mittelwert)

        Args:
            save_path: Zieldatei; Standard ist loss.png im Ausgabeverzeichnis

        Returns:
            Optional[Path]: Pfad der Grafik oder None ohne Ziel
        """
        if save_path is None:
            if self.out_dir is None:
                return None
            save_path = self.out_dir / LOSS_PLOT
        series = self.loss_series()
        fig, ax = plt.subplots(figsize=(10, 5))
        ax.plot(series.index, series.values, alpha=0.4, label="Verlust")
        ax.plot(series.index, series.rolling(window=window, min_periods=1).mean().values,
                label=f"Gleitender Mittelwert ({window})")
        ax.set_xlabel("Schritt")
        ax.set_ylabel("Kreuzentropie")
        ax.set_title("Trainingsverlauf")
        ax.grid(True)
        ax.legend()
        fig.tight_layout()
        save_path = Path(save_path)
        save_path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(save_path)
        plt.close(fig)
        return save_path

    def generate_report(self) -> Dict[str, Any]:
        """
        Fasst das Training zusammen
        """
        series = self.loss_series()
        report: Dict[str, Any] = {
            "steps": self.state.step,
            "final_loss": float(series.iloc[-1]) if len(series) else math.nan,
            "min_loss": float(series.min()) if len(series) else math.nan,
            "best_step": self.state.best_step,
            "best_token_accuracy": self.state.best_metric,
        }
        if self.validation_history:
            report.update({f"final_{key}": value for key, value in self.validation_history[-1].items()
                           if key != "step"})
        return report


def train(model: Seq2SeqModel, dataset: SequenceDataset, state: Optional[TrainState] = None,
          config: Optional[TrainConfig] = None, valid_dataset: Optional[SequenceDataset] = None,
          out_dir: Optional[Union[str, Path]] = None) -> TrainState:
    """
    Trainiert ein Modell und gibt den Endzustand zurück

    Args:
        model: Modell
        dataset: Trainingsdatensatz
        state: Optionaler Zustand zur Fortsetzung
        config: Trainingshyperparameter
        valid_dataset: Optionaler Validierungsdatensatz
        out_dir: Optionales Ausgabeverzeichnis

    Returns:
        TrainState: Zustand nach dem Training
    """
    engine = TrainEngine(model, config, out_dir, valid_dataset)
    if state is not None:
        engine.restore_state(state)
    return engine.run(dataset)
