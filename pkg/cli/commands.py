"""
Kommandozeilen-Schnittstelle des capsule-Transformers
Befehle: train, evaluate, export-attention, compare-attention, route-demo, generate
"""

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np

from cli.attention_export import attention_divergence, export_attention, parse_token_line, read_attention
from cli.run_config import RunConfig
from core.checkpoint import load_checkpoint
from core.model import VARIANTS, ModelFactory
from core.routing import RoutingResult, VoteSet, dynamic_routing
from core.tensor import Tensor
from data.synthetic_tasks import TASK_KINDS, generate, read_tsv, write_tsv
from training.metrics import evaluate
from training.train_engine import METRIC_LOG, TrainEngine
from utils.errors import EXIT_SUCCESS, EXIT_USAGE, InputError, handle_error
from utils.helpers import MetricLog, setup_logging

# Logger konfigurieren
logger = logging.getLogger("capsule_transformer.cli")

RESOLVED_CONFIG = "config.txt"


def collect_overrides(args: argparse.Namespace) -> Dict[str, str]:
    """
    Sammelt die Überschreibungen aus den Kommandozeilen-Flags als Rohwerte
    """
    overrides: Dict[str, str] = {}
    for flag, key in (("preset", "preset"), ("task", "task"), ("variant", "variant"), ("seed", "seed"),
                      ("iters", "iterations"), ("routing_layers", "routing_layer_range"), ("steps", "steps")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = str(value)
    if getattr(args, "no_vertical", False):
        overrides["vertical_enabled"] = "false"
    if getattr(args, "no_horizontal", False):
        overrides["horizontal_enabled"] = "false"
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise InputError(f"--set erwartet KEY=VALUE, erhalten: '{item}'")
        overrides[key.strip()] = value.strip()
    return overrides


def resolve_run_config(args: argparse.Namespace) -> RunConfig:
    run_config = RunConfig.resolve(args.config, collect_overrides(args))
    run_config.log()
    return run_config


# ---------------------------------------------------------------------------
# Befehle
# ---------------------------------------------------------------------------

def cmd_train(args: argparse.Namespace) -> int:
    """
    Trainiert ein Modell und schreibt Checkpoints, Metrik-Log, Verlustkurve und aufgelöste Konfiguration
    """
    # Konfiguration vollständig auflösen, bevor etwas geschrieben wird
    run_config = resolve_run_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    run_config.write(out_dir / RESOLVED_CONFIG)

    train_data = generate(run_config.task)
    valid_data = generate(run_config.validation_task())
    if args.resume:
        engine = TrainEngine.resume(args.resume, run_config.train, out_dir, valid_data)
    else:
        model = ModelFactory.create_model(run_config.variant, run_config.model, run_config.seed)
        engine = TrainEngine(model, run_config.train, out_dir, valid_data)

    engine.run(train_data)
    engine.plot_results()
    report = engine.generate_report()
    engine.metric_log.append(kind="final", **report)
    print(f"token_accuracy={report.get('final_token_accuracy', float('nan'))!r} "
          f"loss={report['final_loss']!r} checkpoint={out_dir / 'best.npz'}")
    return EXIT_SUCCESS


def cmd_evaluate(args: argparse.Namespace) -> int:
    """
    Wertet einen Checkpoint auf einer TSV-Datei oder auf dem Validierungsdatensatz der Aufgabe aus
    """
    checkpoint = load_checkpoint(args.checkpoint)
    model = checkpoint.build_model(seed=int(checkpoint.meta.get("seed", 0)))
    if args.data:
        dataset = read_tsv(args.data, vocab_size=model.config.vocab_size)
    else:
        run_config = resolve_run_config(args)
        task = replace(run_config.validation_task(), vocab_size=model.config.vocab_size)
        dataset = generate(task.validate(max_len=model.config.max_len))

    metrics = evaluate(model, dataset)
    if args.out:
        MetricLog(Path(args.out) / METRIC_LOG).append(kind="evaluate", checkpoint=args.checkpoint, **metrics)
    print(" ".join(f"{key}={value!r}" for key, value in metrics.items()))
    return EXIT_SUCCESS


def cmd_export_attention(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    model = checkpoint.build_model()
    text = Path(args.input_file).read_text(encoding="utf-8") if args.input_file else args.input
    if text is None:
        raise InputError("Eingabe fehlt (--input oder --input-file)")
    frame = export_attention(model, parse_token_line(text), args.out)
    print(f"rows={len(frame)} out={args.out}")
    return EXIT_SUCCESS


def cmd_compare_attention(args: argparse.Namespace) -> int:
    divergence = attention_divergence(read_attention(args.first), read_attention(args.second))
    print(f"attention_divergence={divergence!r}")
    return EXIT_SUCCESS


def parse_votes_file(path: Union[str, Path], iterations: Optional[int] = None) -> VoteSet:
    """
    Liest eine Stimmdatei: Kopfzeile 'M N K T', danach M*N Zeilen mit je K reellen Zahlen (m-major)

    Args:
        path: Stimmdatei
        iterations: Optionale Überschreibung von T

    Returns:
        VoteSet: Stimmvektoren (M, N, K) und Iterationszahl
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Stimmdatei nicht gefunden: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].strip():
        raise InputError("Kopfzeile 'M N K T' fehlt", line=1)
    header = lines[0].split()
    try:
        if len(header) != 4:
            raise ValueError(lines[0])
        m, n, k, t = (int(value) for value in header)
    except ValueError:
        raise InputError(f"Kopfzeile muss vier Ganzzahlen 'M N K T' enthalten: '{lines[0]}'", line=1) from None
    if min(m, n, k, t) < 1:
        raise InputError("M, N, K und T müssen mindestens 1 sein", line=1)

    body = lines[1:]
    expected = m * n
    votes = np.zeros((m, n, k))
    for index in range(expected):
        line = index + 2
        if index >= len(body):
            raise InputError(f"Erwartet {expected} Stimmzeilen, gefunden {index}", line=line)
        parts = body[index].split()
        if len(parts) != k:
            raise InputError(f"Erwartet {k} Werte, gefunden {len(parts)}", line=line)
        try:
            values = [float(p) for p in parts]
        except ValueError:
            raise InputError(f"Ungültige Zahl in '{body[index]}'", line=line) from None
        if not np.all(np.isfinite(values)):
            raise InputError("Stimmvektoren müssen endlich sein", line=line)
        votes[index // n, index % n] = values
    for offset, extra in enumerate(body[expected:]):
        if extra.strip():
            raise InputError(f"Unerwartete Zeile nach {expected} Stimmzeilen", line=expected + offset + 2)
    return VoteSet(Tensor(votes), iterations if iterations is not None else t)


def format_routing_result(result: RoutingResult) -> str:
    """
    Formatiert Omega, R und B zeilenweise mit voller Genauigkeit
    """
    sections = [("Omega", result.omega.data), ("R", result.coupling.data), ("B", result.logits.data)]
    lines = []
    for title, matrix in sections:
        lines.append(title)
        lines.extend(" ".join(repr(float(value)) for value in row) for row in np.atleast_2d(matrix))
    return "\n".join(lines)


def cmd_route_demo(args: argparse.Namespace) -> int:
    vote_set = parse_votes_file(args.votes, args.iters)
    result = dynamic_routing(vote_set)
    print(format_routing_result(result))
    return EXIT_SUCCESS


def cmd_generate(args: argparse.Namespace) -> int:
    run_config = resolve_run_config(args)
    task = run_config.task if args.count is None else replace(run_config.task, sample_count=args.count)
    path = write_tsv(generate(task), args.out)
    print(f"samples={task.sample_count} out={path}")
    return EXIT_SUCCESS


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_run_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="Konfigurationsdatei mit 'key = value'-Zeilen")
    parser.add_argument("--preset", help="Preset (toy, base, big)")
    parser.add_argument("--task", choices=TASK_KINDS, help="Synthetische Aufgabe")
    parser.add_argument("--variant", choices=VARIANTS, help="Modellvariante")
    parser.add_argument("--no-vertical", action="store_true", help="Vertikales Routing deaktivieren")
    parser.add_argument("--no-horizontal", action="store_true", help="Horizontales Routing deaktivieren")
    parser.add_argument("--routing-layers", help="Encoder-Schichten mit Routing, z. B. 1..2")
    parser.add_argument("--iters", type=int, help="Routing-Iterationen T")
    parser.add_argument("--seed", type=int, help="Seed für Initialisierung, Daten und Dropout")
    parser.add_argument("--steps", type=int, help="Trainingsschritte")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE", help="Beliebigen Schlüssel überschreiben")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="capsule-transformer",
                                     description="Transformer mit Capsule-Routing-Selbstaufmerksamkeit")
    parser.add_argument("--log-level", default=None, help="Log-Level (Standard: CAPSULE_LOG_LEVEL oder INFO)")
    subparsers = parser.add_subparsers(dest="command", required=True)

    train_parser = subparsers.add_parser("train", help="Modell trainieren")
    _add_run_config_flags(train_parser)
    train_parser.add_argument("--out", required=True, help="Ausgabeverzeichnis")
    train_parser.add_argument("--resume", help="Training aus einem Checkpoint (last.npz) fortsetzen")
    train_parser.set_defaults(func=cmd_train)

    eval_parser = subparsers.add_parser("evaluate", help="Checkpoint auswerten")
    _add_run_config_flags(eval_parser)
    eval_parser.add_argument("--checkpoint", required=True)
    eval_parser.add_argument("--data", help="TSV-Datensatz (Standard: Validierungsdaten der Aufgabe)")
    eval_parser.add_argument("--out", help="Verzeichnis für das Metrik-Log")
    eval_parser.set_defaults(func=cmd_evaluate)

    export_parser = subparsers.add_parser("export-attention", help="Attention-Gewichte als CSV exportieren")
    export_parser.add_argument("--checkpoint", required=True)
    export_parser.add_argument("--input", help="Token-IDs, leerzeichengetrennt")
    export_parser.add_argument("--input-file", help="Datei mit leerzeichengetrennten Token-IDs")
    export_parser.add_argument("--out", required=True, help="Ziel-CSV")
    export_parser.set_defaults(func=cmd_export_attention)

    compare_parser = subparsers.add_parser("compare-attention", help="Zwei Attention-Exporte vergleichen")
    compare_parser.add_argument("first")
    compare_parser.add_argument("second")
    compare_parser.set_defaults(func=cmd_compare_attention)

    route_parser = subparsers.add_parser("route-demo", help="Dynamisches Routing auf einer Stimmdatei")
    route_parser.add_argument("votes", help="Stimmdatei ('M N K T', dann M*N Zeilen mit K Werten)")
    route_parser.add_argument("--iters", type=int, help="T aus der Datei überschreiben")
    route_parser.set_defaults(func=cmd_route_demo)

    generate_parser = subparsers.add_parser("generate", help="Synthetischen Datensatz als TSV schreiben")
    _add_run_config_flags(generate_parser)
    generate_parser.add_argument("--count", type=int, help="Anzahl der Beispiele")
    generate_parser.add_argument("--out", required=True, help="Ziel-TSV")
    generate_parser.set_defaults(func=cmd_generate)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """
    Einstiegspunkt; gibt den Exit-Code zurück (0 Erfolg, 1 Nutzung/Konfiguration, 2 numerischer Fehler)
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_SUCCESS if e.code in (0, None) else EXIT_USAGE

    setup_logging(args.log_level)
    try:
        return args.func(args)
    except Exception as e:
        message, code = handle_error(e)
        logger.error(message)
        print(message, file=sys.stderr)
        return code
