"""
Laufkonfiguration
Bildet jeden Hyperparameter von Modell, Aufgabe und Training auf einen Schlüssel ab und löst
Preset, Konfigurationsdatei und Kommandozeilen-Überschreibungen in dieser Reihenfolge auf
"""

import logging
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

from core.model import VARIANTS, ModelConfig
from data.synthetic_tasks import SyntheticTask
from training.train_engine import TrainConfig
from utils.errors import ConfigurationError
from utils.helpers import ConfigUtils

# Logger konfigurieren
logger = logging.getLogger("capsule_transformer.cli")

# Offset des Validierungs-Seeds gegenüber dem Trainings-Seed
VALIDATION_SEED_OFFSET = 1000


def _build_key_registry() -> Dict[str, Tuple[str, str, Any]]:
    registry: Dict[str, Tuple[str, str, Any]] = {
        "preset": ("run", "preset", str),
        "variant": ("run", "variant", str),
        "seed": ("run", "seed", int),
        "task": ("task", "kind", str),
    }
    for section, cls in (("model", ModelConfig), ("train", TrainConfig)):
        hints = typing.get_type_hints(cls)
        for f in fields(cls):
            if f.name != "seed":
                registry[f.name] = (section, f.name, hints[f.name])
    task_hints = typing.get_type_hints(SyntheticTask)
    for name in ("min_length", "max_length", "sample_count", "distinct"):
        registry[name] = ("task", name, task_hints[name])
    return registry


# Schlüssel -> (Abschnitt, Feld, Typ)
KEY_REGISTRY = _build_key_registry()


@dataclass
class RunConfig:
    """
    Vollständig aufgelöste Konfiguration eines CLI-Laufs
    """
    model: ModelConfig = field(default_factory=ModelConfig)
    task: SyntheticTask = field(default_factory=SyntheticTask)
    train: TrainConfig = field(default_factory=TrainConfig)
    variant: str = "capsule"
    seed: int = 0
    preset: str = "toy"

    @classmethod
    def resolve(cls, config_path: Optional[Union[str, Path]] = None,
                overrides: Optional[Dict[str, str]] = None) -> "RunConfig":
        """
        Löst die Konfiguration auf: Preset, dann Datei, dann Überschreibungen

        Args:
            config_path: Optionale Datei mit 'key = value'-Zeilen
            overrides: Überschreibungen aus der Kommandozeile (Schlüssel -> Rohwert)

        Returns:
            RunConfig: Geprüfte Konfiguration
        """
        entries: Dict[str, str] = {}
        if config_path is not None:
            for key, (value, line) in ConfigUtils.read_config_file(config_path).items():
                if key not in KEY_REGISTRY:
                    raise ConfigurationError(f"Unbekannter Schlüssel '{key}' in {config_path}, Zeile {line}", key=key)
                entries[key] = value
        for key, value in (overrides or {}).items():
            if key not in KEY_REGISTRY:
                raise ConfigurationError(f"Unbekannter Schlüssel '{key}'", key=key)
            entries[key] = value

        preset = entries.pop("preset", "toy").strip()
        sections: Dict[str, Dict[str, Any]] = {"run": {}, "model": {}, "task": {}, "train": {}}
        for key, raw in entries.items():
            section, name, target_type = KEY_REGISTRY[key]
            sections[section][name] = ConfigUtils.parse_value(raw, target_type, key)

        seed = sections["run"].get("seed", 0)
        variant = sections["run"].get("variant", "capsule")
        if variant not in VARIANTS:
            raise ConfigurationError(f"Unbekannte Modellvariante: {variant}", key="variant")

        model = ModelConfig.from_preset(preset, **sections["model"]).validate()
        train = TrainConfig.from_preset(preset, seed=seed, **sections["train"]).validate()
        task = SyntheticTask(vocab_size=model.vocab_size, seed=seed, **sections["task"])
        task.validate(max_len=model.max_len)
        return cls(model=model, task=task, train=train, variant=variant, seed=seed, preset=preset)

    def validation_task(self) -> SyntheticTask:
        return self.task.derive(self.train.valid_samples, VALIDATION_SEED_OFFSET)

    def as_entries(self) -> Dict[str, Any]:
        entries: Dict[str, Any] = {"preset": self.preset, "variant": self.variant, "seed": self.seed}
        sources = {"model": self.model, "train": self.train, "task": self.task}
        for key, (section, name, _) in KEY_REGISTRY.items():
            if section == "run":
                continue
            entries[key] = getattr(sources[section], name)
        return entries

    def to_lines(self) -> List[str]:
        """
        Konfiguration als 'key = value'-Zeilen (wieder einlesbar)
        """
        lines = []
        for key, value in self.as_entries().items():
            if isinstance(value, tuple):
                value = f"{value[0]}..{value[1]}"
            elif value is None:
                value = "none"
            lines.append(f"{key} = {value}")
        return lines

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("# Vollständig aufgelöste Konfiguration\n" + "\n".join(self.to_lines()) + "\n",
                        encoding="utf-8")
        return path

    def log(self) -> None:
        logger.info("Aufgelöste Konfiguration: " + ", ".join(self.to_lines()))
