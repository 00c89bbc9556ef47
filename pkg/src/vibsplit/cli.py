"""Command-line surface: synthesis, training, probing, attribution, export.

One TOML configuration file drives every subcommand; a handful of flags
override the fields that vary between runs (stage, task, layer, bottleneck
width, seed, output directory).  Every run writes a resolved-config snapshot
beside its outputs, and all artifacts land under the output directory in
``checkpoints/``, ``reports/``, and ``tables/``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .attribution import load_lexicon, run_attribution
from .checkpoint import file_fingerprint
from .ctc import Vocabulary
from .data import (
    DataError,
    UtteranceRecord,
    corpus_fingerprint,
    load_manifest,
    save_manifest,
    split_corpus,
)
from .layerwise import LayerSweepReport, layerwise_sweep, probe_layer
from .optim import DivergenceError
from .probing import ProbeConfig, run_sanity_suite
from .stage1 import (
    Stage1Config,
    Stage1Model,
    eval_stage1,
    load_stage1,
    save_stage1,
    textual_latents,
    train_stage1,
)
from .stage2 import (
    Stage2Config,
    Stage2Model,
    acoustic_latents,
    eval_stage2,
    load_stage2,
    save_stage2,
    train_stage2,
)
from .synth import SynthConfig, synth_generate, synth_lexicon, synth_vocabulary


class ConfigError(ValueError):
    """Bad or missing configuration (exit code 2)."""


_SYNTH_TUPLE_FIELDS = frozenset(
    {"frames_per_symbol", "words_per_transcript", "word_length", "text_layers"}
)
_ATTRIBUTE_DEFAULTS = {"lexicon": "", "ig_steps": 64, "window": 5, "prominence": 0.1}


@dataclass
class RunConfig:
    out: Path
    seed: int
    workers: int
    sweep: bool
    stage: int | None
    corpus: dict[str, Any]
    stage1: Stage1Config
    stage2: Stage2Config
    probe: ProbeConfig
    attribute: dict[str, Any]
    checkpoints: dict[str, str]
    snapshot: dict[str, Any]

    def path(self, kind: str) -> Path:
        folder = self.out / kind
        folder.mkdir(parents=True, exist_ok=True)
        return folder

    def stage1_checkpoint(self) -> Path:
        named = self.checkpoints.get("stage1")
        return Path(named) if named else self.path("checkpoints") / "stage1.vckp"

    def stage2_checkpoint(self, task: str) -> Path:
        named = self.checkpoints.get("stage2")
        return Path(named) if named else self.path("checkpoints") / f"stage2-{task}.vckp"


def _section(config: dict, name: str) -> dict:
    value = config.get(name, {})
    if not isinstance(value, dict):
        raise ConfigError(f"[{name}] must be a table, got {type(value).__name__}")
    return dict(value)


def _build(cls, section: dict, name: str, tuple_fields: frozenset = frozenset()):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(section) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    coerced = {
        key: tuple(value) if key in tuple_fields and value is not None else value
        for key, value in section.items()
    }
    return cls(**coerced)


def _load_toml(path: Path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config file {path}: {exc}") from exc


def resolve_config(args: argparse.Namespace) -> RunConfig:
    config = _load_toml(Path(args.config)) if args.config else {}

    seed = args.seed if args.seed is not None else int(config.get("seed", 0))
    out = Path(args.out) if args.out else Path(config.get("out", "out"))
    workers = args.workers if args.workers is not None else int(config.get("workers", 1))
    sweep = bool(args.sweep) or bool(config.get("sweep", False))

    corpus = _section(config, "corpus")
    if "synth" in corpus:
        synth = dict(corpus["synth"])
        synth.setdefault("seed", seed)
        corpus["synth"] = asdict(_build(SynthConfig, synth, "corpus.synth",
                                        _SYNTH_TUPLE_FIELDS))

    raw1 = _section(config, "stage1")
    raw2 = _section(config, "stage2")
    raw_probe = _section(config, "probe")
    for raw in (raw1, raw2, raw_probe):
        raw.setdefault("seed", seed)
    if args.d is not None:
        raw1["d"] = raw2["d"] = args.d
    if args.layer is not None:
        raw1["layer"] = raw2["layer"] = args.layer
    if args.task is not None:
        raw2["task"] = args.task

    stage1 = _build(Stage1Config, raw1, "stage1", frozenset({"allowed_widths"}))
    stage2 = _build(Stage2Config, raw2, "stage2")
    probe = _build(ProbeConfig, raw_probe, "probe")

    attribute = {**_ATTRIBUTE_DEFAULTS, **_section(config, "attribute")}
    unknown = sorted(set(attribute) - set(_ATTRIBUTE_DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown key(s) in [attribute]: {', '.join(unknown)}")
    checkpoints = {k: str(v) for k, v in _section(config, "checkpoints").items()}

    snapshot: dict[str, Any] = {
        "out": str(out),
        "seed": seed,
        "workers": workers,
        "sweep": sweep,
        "corpus": corpus,
        "stage1": asdict(stage1),
        "stage2": asdict(stage2),
        "probe": asdict(probe),
        "attribute": attribute,
    }
    if checkpoints:
        snapshot["checkpoints"] = checkpoints

    return RunConfig(
        out=out, seed=seed, workers=workers, sweep=sweep,
        stage=getattr(args, "stage", None),
        corpus=corpus, stage1=stage1, stage2=stage2, probe=probe,
        attribute=attribute, checkpoints=checkpoints, snapshot=snapshot,
    )


def _toml_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise ConfigError(f"cannot serialize {type(value).__name__} to TOML")


def _toml_lines(table: Mapping[str, Any], prefix: str = "") -> list[str]:
    lines = []
    nested = []
    for key, value in table.items():
        if value is None:
            continue
        if isinstance(value, Mapping):
            nested.append((key, value))
        else:
            lines.append(f"{key} = {_toml_value(value)}")
    for key, value in nested:
        name = f"{prefix}{key}"
        lines.append("")
        lines.append(f"[{name}]")
        lines.extend(_toml_lines(value, prefix=f"{name}."))
    return lines


def write_snapshot(run: RunConfig) -> None:
    run.out.mkdir(parents=True, exist_ok=True)
    text = "\n".join(_toml_lines(run.snapshot)).strip() + "\n"
    (run.out / "resolved-config.toml").write_text(text, encoding="utf-8")


def _load_corpus(run: RunConfig) -> tuple[list[UtteranceRecord], Vocabulary,
                                          SynthConfig | None]:
    corpus = run.corpus
    if "synth" in corpus:
        synth = _build(SynthConfig, dict(corpus["synth"]), "corpus.synth",
                       _SYNTH_TUPLE_FIELDS)
        return synth_generate(synth), synth_vocabulary(synth), synth
    if "manifest" in corpus:
        records = load_manifest(corpus["manifest"])
        characters = corpus.get("characters") or "".join(
            sorted({ch for record in records for ch in record.transcript})
        )
        return records, Vocabulary.from_characters(characters), None
    raise ConfigError("corpus requires either a 'manifest' path or a [corpus.synth] table")


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _layer_weights_csv(weights: np.ndarray) -> str:
    lines = ["layer,weight"]
    lines += [f"{i},{w:.8f}" for i, w in enumerate(weights)]
    return "\n".join(lines) + "\n"


def cmd_synth(run: RunConfig) -> None:
    if "synth" not in run.corpus:
        raise ConfigError("synth command requires a [corpus.synth] table")
    records, vocab, _ = _load_corpus(run)
    corpus_dir = run.out / "corpus"
    corpus_dir.mkdir(parents=True, exist_ok=True)
    save_manifest(records, corpus_dir / "manifest.jsonl")
    vocab.save(corpus_dir / "vocabulary.txt")
    print(f"wrote {len(records)} records to {corpus_dir / 'manifest.jsonl'}")


def _train_sweep(run: RunConfig, records: list[UtteranceRecord],
                 vocab: Vocabulary) -> None:
    report, models = layerwise_sweep(records, vocab, run.stage1, run.stage2,
                                     run.probe, workers=run.workers)
    fingerprint = corpus_fingerprint(records)
    checkpoint_dir = run.path("checkpoints")
    for layer, (s1, s2) in models.items():
        s1_path = checkpoint_dir / f"stage1-layer{layer}.vckp"
        save_stage1(s1_path, s1, corpus=fingerprint)
        save_stage2(checkpoint_dir / f"stage2-{run.stage2.task}-layer{layer}.vckp",
                    s2, corpus=fingerprint,
                    stage1_fingerprint=file_fingerprint(s1_path))
    tables = run.path("tables")
    _write(tables / "sweep-stage1.csv", report.stage1_table())
    _write(tables / "sweep-stage2.csv", report.stage2_table())
    _write(tables / "sweep-probes.csv", report.probe_table())
    report.save(run.path("reports") / "sweep-report.json")
    print(f"swept {len(report.rows)} layers (task={report.task})")


def cmd_train(run: RunConfig) -> None:
    if run.sweep:
        records, vocab, _ = _load_corpus(run)
        _train_sweep(run, records, vocab)
        return
    if run.stage not in (1, 2):
        raise ConfigError("train requires --stage 1 or --stage 2")
    records, vocab, _ = _load_corpus(run)
    train, test = split_corpus(records)
    fingerprint = corpus_fingerprint(records)
    evaluation = test or train

    if run.stage == 1:
        model = train_stage1(train, vocab, run.stage1)
        save_stage1(run.stage1_checkpoint(), model, corpus=fingerprint)
        metrics = {**eval_stage1(model, evaluation), "history": model.history}
        _write(run.path("reports") / "stage1-metrics.json",
               json.dumps(metrics, indent=2))
        if run.stage1.layer is None:
            _write(run.path("tables") / "stage1-layer-weights.csv",
                   _layer_weights_csv(model.layer_weights()))
        print(f"stage 1: held-out wer {metrics['wer']:.4f} cer {metrics['cer']:.4f}")
        return

    stage1_path = run.stage1_checkpoint()
    if not stage1_path.exists():
        raise ConfigError(f"stage 2 requires a stage-1 checkpoint at {stage1_path}")
    stage1_model, stage1_meta = load_stage1(stage1_path)
    if stage1_meta.get("corpus") and stage1_meta["corpus"] != fingerprint:
        raise ConfigError(
            "stage-1 checkpoint was trained on a different corpus "
            f"(fingerprint {stage1_meta['corpus'][:12]}… != {fingerprint[:12]}…)"
        )
    model = train_stage2(train, stage1_model, run.stage2)
    save_stage2(run.stage2_checkpoint(run.stage2.task), model, corpus=fingerprint,
                stage1_fingerprint=file_fingerprint(stage1_path))
    metrics = {**eval_stage2(model, evaluation), "history": model.history}
    _write(run.path("reports") / f"stage2-{run.stage2.task}-metrics.json",
           json.dumps(metrics, indent=2))
    if run.stage2.layer is None:
        _write(run.path("tables") / f"stage2-{run.stage2.task}-layer-weights.csv",
               _layer_weights_csv(model.layer_weights()))
    print(f"stage 2 ({run.stage2.task}): held-out accuracy {metrics['accuracy']:.4f}")


def _sweep_models(run: RunConfig) -> dict[int, tuple[Stage1Model, Stage2Model]]:
    checkpoint_dir = run.path("checkpoints")
    models = {}
    for path in sorted(checkpoint_dir.glob("stage1-layer*.vckp")):
        layer = int(path.stem.removeprefix("stage1-layer"))
        stage2_path = checkpoint_dir / f"stage2-{run.stage2.task}-layer{layer}.vckp"
        if not stage2_path.exists():
            raise ConfigError(f"missing sweep checkpoint {stage2_path}")
        models[layer] = (load_stage1(path)[0], load_stage2(stage2_path)[0])
    if not models:
        raise ConfigError(f"no sweep checkpoints under {checkpoint_dir}")
    return models


def cmd_probe(run: RunConfig) -> None:
    records, vocab, _ = _load_corpus(run)

    if run.sweep:
        models = _sweep_models(run)
        task = run.stage2.task
        class_count = max(pair[1].class_count for pair in models.values())
        lines = ["layer,textual,acoustic,raw,chance"]
        for layer in sorted(models):
            s1, s2 = models[layer]
            textual, acoustic, raw = probe_layer(records, s1, s2, task,
                                                 run.probe, layer)
            lines.append(f"{layer},{textual:.6f},{acoustic:.6f},{raw:.6f},"
                         f"{1.0 / class_count:.6f}")
        _write(run.path("tables") / "sweep-probes.csv", "\n".join(lines) + "\n")
        print(f"probed {len(models)} layers (task={task})")
        return

    stage1_path = run.stage1_checkpoint()
    if not stage1_path.exists():
        raise ConfigError(f"probe requires a stage-1 checkpoint at {stage1_path}")
    stage1_model, _ = load_stage1(stage1_path)
    stage2_paths = sorted(run.path("checkpoints").glob("stage2-*.vckp"))
    named = run.checkpoints.get("stage2")
    if named:
        stage2_paths.append(Path(named))
    stage2_models = {}
    for path in stage2_paths:
        if "-layer" in path.stem:
            continue
        model, _ = load_stage2(path)
        stage2_models[model.config.task] = model
    if not stage2_models:
        raise ConfigError("probe requires at least one stage-2 checkpoint")

    report = run_sanity_suite(stage1_model, stage2_models, records, vocab, run.probe)
    report.save(run.path("reports") / "probe-report.json")
    _write(run.path("tables") / "probe-grid.csv", report.to_csv())
    print(f"probe report: {len(report.entries)} entries")


def _agreement_csv(table: Mapping[str, Mapping[str, float]]) -> str:
    channels = sorted({name for row in table.values() for name in row})
    lines = ["route," + ",".join(channels)]
    for route, row in table.items():
        cells = [f"{row[name]:.6f}" if name in row else "" for name in channels]
        lines.append(f"{route}," + ",".join(cells))
    return "\n".join(lines) + "\n"


def cmd_attribute(run: RunConfig) -> None:
    records, vocab, synth = _load_corpus(run)
    stage1_path = run.stage1_checkpoint()
    stage2_path = run.stage2_checkpoint(run.stage2.task)
    for path in (stage1_path, stage2_path):
        if not path.exists():
            raise ConfigError(f"attribute requires a checkpoint at {path}")
    stage1_model, _ = load_stage1(stage1_path)
    stage2_model, _ = load_stage2(stage2_path)

    if run.attribute["lexicon"]:
        lexicon = load_lexicon(run.attribute["lexicon"])
    elif synth is not None:
        lexicon = synth_lexicon(synth)
    else:
        raise ConfigError("attribute requires a lexicon path for manifest corpora")

    results, table = run_attribution(
        records, stage1_model, stage2_model, lexicon, run.probe,
        ig_steps=int(run.attribute["ig_steps"]),
        window=int(run.attribute["window"]),
        prominence=float(run.attribute["prominence"]),
    )
    payload = {
        "agreement": {route: dict(row) for route, row in table.items()},
        "records": [json.loads(result.to_json()) for result in results],
    }
    _write(run.path("reports") / "attribution.json", json.dumps(payload, indent=2))
    _write(run.path("tables") / "agreement.csv", _agreement_csv(table))
    per_record = run.path("tables") / "attribution"
    for result in results:
        _write(per_record / f"{result.record_id}.csv", result.to_csv())
    print(f"attributed {len(results)} records")


def cmd_export_latents(run: RunConfig) -> None:
    records, vocab, _ = _load_corpus(run)
    stage1_path = run.stage1_checkpoint()
    stage2_path = run.stage2_checkpoint(run.stage2.task)
    for path in (stage1_path, stage2_path):
        if not path.exists():
            raise ConfigError(f"export-latents requires a checkpoint at {path}")
    stage1_model, _ = load_stage1(stage1_path)
    stage2_model, _ = load_stage2(stage2_path)

    label_keys = sorted({key for record in records for key in (record.labels or {})})
    d1 = stage1_model.config.d
    d2 = stage2_model.config.d
    header = (["id"] + label_keys
              + [f"textual_{i}" for i in range(d1)]
              + [f"acoustic_{i}" for i in range(d2)])
    lines = [",".join(header)]
    for record in records:
        textual = textual_latents(stage1_model, record).mean(axis=0)
        acoustic = acoustic_latents(stage2_model, record).mean(axis=0)
        labels = record.labels or {}
        row = [record.id] + [str(labels.get(key, "")) for key in label_keys]
        row += [f"{v:.8f}" for v in textual] + [f"{v:.8f}" for v in acoustic]
        lines.append(",".join(row))
    _write(run.path("tables") / "latents.csv", "\n".join(lines) + "\n")
    print(f"exported {len(records)} utterance-mean latents")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML configuration file")
    common.add_argument("--out", help="output directory (default: out)")
    common.add_argument("--seed", type=int, help="base seed for every component")
    common.add_argument("--task", help="stage-2 task, e.g. emotion or speaker")
    common.add_argument("--layer", type=int,
                        help="pin one upstream layer instead of the learned mix")
    common.add_argument("--sweep", action="store_true",
                        help="train/probe each layer separately")
    common.add_argument("--d", type=int, help="bottleneck width")
    common.add_argument("--workers", type=int,
                        help="parallel jobs for sweep mode (default 1)")

    parser = argparse.ArgumentParser(
        prog="vibsplit",
        description="Two-stage information-bottleneck pipeline over exported "
                    "speech hidden states.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", parents=[common],
                           help="train stage 1 or stage 2 (or a layer sweep)")
    train.add_argument("--stage", type=int, choices=(1, 2), required=False,
                       help="which stage to train (required unless --sweep)")
    train.set_defaults(handler=cmd_train)

    for name, handler, description in (
        ("synth", cmd_synth, "materialize a synthetic corpus to disk"),
        ("probe", cmd_probe, "run the probing suite against trained checkpoints"),
        ("attribute", cmd_attribute, "frame attribution scores and agreement table"),
        ("export-latents", cmd_export_latents,
         "CSV of utterance-mean latents with labels"),
    ):
        sp = sub.add_parser(name, parents=[common], help=description)
        sp.set_defaults(handler=handler)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        run = resolve_config(args)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        write_snapshot(run)
        args.handler(run)
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 4
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
