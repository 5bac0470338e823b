import argparse
import json
import logging
import statistics
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence as Seq, Tuple

from src.app.exceptions import EXIT_OK, ConfigError, DataError, NumericError, exit_code_for
from src.app.models.tracker_net import SiameseTracker
from src.app.schemas import RunConfig, parse_key_values
from src.app.services.sequences import Sequence, load_sequences, write_results, write_sequences
from src.app.services.synthdata import generate_sequences, sparsity_sweep, write_sweep
from src.app.services.tracker import TemplateStrategy, Tracker, evaluate, format_summary
from src.app.services.training import Trainer, fit, load_checkpoint, planned_steps, save_checkpoint
from src.app.settings import OUTPUT_DIR, configure_logging, configure_torch

logger = logging.getLogger(__name__)

CONFIG_FILE = "config.txt"
CHECKPOINT_FILE = "checkpoint.pt"
METRICS_FILE = "metrics.jsonl"


def resolve_config(args: argparse.Namespace, base: RunConfig | None = None) -> RunConfig:
    """Config file (or `base`) with the command-line overrides applied on top."""
    cfg = RunConfig.from_file(args.config) if args.config else (base or RunConfig())
    overrides: Dict[str, str] = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got '{item}'")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if getattr(args, "strategy", None):
        overrides["tracker.strategy"] = args.strategy
    if getattr(args, "format", None):
        overrides["data.format"] = args.format
    return cfg.with_overrides(overrides) if overrides else cfg


def prepare_output(path: str | None, cfg: RunConfig) -> Path:
    out = Path(path or OUTPUT_DIR)
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_FILE).write_text(cfg.to_text(), encoding="utf-8")
    return out


def training_sequences(cfg: RunConfig) -> List[Sequence]:
    if cfg.data.train_path:
        return load_sequences(cfg.data.train_path)
    return generate_sequences(cfg.scenario, cfg.data.train_sequences, cfg.data.train_seed)


def evaluation_sequences(cfg: RunConfig) -> List[Sequence]:
    if cfg.data.eval_path:
        return load_sequences(cfg.data.eval_path)
    return generate_sequences(cfg.scenario, cfg.data.eval_sequences, cfg.data.eval_seed)


def load_model(checkpoint: str, cfg: RunConfig | None) -> Tuple[SiameseTracker, RunConfig]:
    state = load_checkpoint(checkpoint)
    cfg = cfg or RunConfig.from_text(state["config"])
    if state["config_hash"] != cfg.config_hash:
        raise ConfigError(f"Checkpoint {checkpoint} was trained with a different model configuration")
    model = SiameseTracker(cfg)
    model.load_state_dict(state["model"])
    model.eval()
    return model, cfg


def train_model(cfg: RunConfig, out: Path | None = None, resume: str | None = None,
                sequences: Seq[Sequence] | None = None) -> Tuple[SiameseTracker, Trainer]:
    configure_torch(cfg.seed)
    sequences = sequences or training_sequences(cfg)
    model = SiameseTracker(cfg)
    trainer = Trainer(model, cfg, planned_steps(cfg, sum(len(s) - 1 for s in sequences)))
    if resume:
        state = load_checkpoint(resume)
        if state["config_hash"] != cfg.config_hash:
            raise ConfigError(f"Cannot resume from {resume}: model configuration differs")
        model.load_state_dict(state["model"])
        if state.get("trainer"):
            trainer.load_state_dict(state["trainer"])
        logger.info("Resuming from %s at step %d", resume, trainer.step)
    logger.info("Training %d steps on %d sequences", trainer.total_steps, len(sequences))
    fit(trainer, sequences, out / METRICS_FILE if out else None)
    if out:
        save_checkpoint(out / CHECKPOINT_FILE, model, trainer)
    return model, trainer


def cmd_train(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    out = prepare_output(args.out, cfg)
    train_model(cfg, out, resume=args.checkpoint)
    print(f"checkpoint written to {out / CHECKPOINT_FILE}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = resolve_config(args) if args.config else None
    model, cfg = load_model(args.checkpoint, cfg)
    if not args.config:
        cfg = resolve_config(args, cfg)
    out = prepare_output(args.out, cfg)
    summary = evaluate(Tracker(model, cfg), evaluation_sequences(cfg), cfg.tracker.strategy)
    write_results(summary.records, out / "results.jsonl")
    (out / "summary.json").write_text(json.dumps(summary.to_dict(), indent=2), encoding="utf-8")
    table = format_summary(summary)
    (out / "summary.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = resolve_config(args) if args.config else None
    model, cfg = load_model(args.checkpoint, cfg)
    if not args.config:
        cfg = resolve_config(args, cfg)
    out = prepare_output(args.out, cfg)
    result = sparsity_sweep(model, cfg)
    table, plot = write_sweep(result, out)
    for row in result.rows:
        print(f"{row.count:>6}{row.success:>10.2f}{row.precision:>11.2f}{row.sequences:>6}")
    print(f"spearman {result.spearman:.3f}; table {table}; plot {plot}")
    return EXIT_OK


@dataclass
class Variant:
    name: str
    overrides: Dict[str, str]


def parse_matrix(text: str) -> List[Variant]:
    """One variant per line: `name: key=value, key=value`."""
    variants = []
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise ConfigError(f"Matrix line {number}: expected 'name: key=value, ...'")
        name, body = (part.strip() for part in line.split(":", 1))
        overrides = parse_key_values("\n".join(body.split(","))) if body else {}
        variants.append(Variant(name, overrides))
    if not variants:
        raise ConfigError("Ablation matrix is empty")
    names = [v.name for v in variants]
    if len(set(names)) != len(names):
        raise ConfigError("Ablation variant names must be unique")
    return variants


@dataclass
class AblationRow:
    variant: str
    similarity: str
    fusion: str
    two_stage: bool
    success: float
    precision: float
    runs: List[Tuple[float, float]]


def run_ablation(base: RunConfig, variants: Seq[Variant], seeds: Seq[int]) -> List[AblationRow]:
    """Train and evaluate every variant once per seed; report the median over seeds."""
    rows = []
    for variant in variants:
        runs = []
        for seed in seeds:
            cfg = base.with_overrides({**variant.overrides, "seed": seed})
            model, _ = train_model(cfg)
            summary = evaluate(Tracker(model, cfg), evaluation_sequences(cfg))
            runs.append((summary.mean.success, summary.mean.precision))
            logger.info("Variant %s seed %d: success %.2f precision %.2f", variant.name, seed, *runs[-1])
        cfg = base.with_overrides(variant.overrides)
        rows.append(AblationRow(variant.name, cfg.encoder.similarity, cfg.encoder.fusion, cfg.decoder.two_stage,
                                statistics.median(r[0] for r in runs), statistics.median(r[1] for r in runs), runs))
    return rows


def format_ablation(rows: Seq[AblationRow]) -> str:
    lines = [f"{'variant':<16}{'similarity':<12}{'fusion':<8}{'stages':>7}{'success':>10}{'precision':>11}"]
    for row in rows:
        stages = 2 if row.two_stage else 1
        lines.append(f"{row.variant:<16}{row.similarity:<12}{row.fusion:<8}{stages:>7}"
                     f"{row.success:>10.2f}{row.precision:>11.2f}")
    return "\n".join(lines)


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    try:
        text = Path(args.matrix).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"Cannot read ablation matrix {args.matrix}: {e}") from e
    variants = parse_matrix(text)
    out = prepare_output(args.out, cfg)
    rows = run_ablation(cfg, variants, [cfg.seed + i for i in range(args.repeats)])
    table = format_ablation(rows)
    (out / "ablation.txt").write_text(table + "\n", encoding="utf-8")
    (out / "ablation.json").write_text(json.dumps([vars(r) for r in rows], indent=2), encoding="utf-8")
    print(table)
    return EXIT_OK


def cmd_generate(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    out = prepare_output(args.out, cfg)
    if args.split == "train":
        count, seed = cfg.data.train_sequences, cfg.data.train_seed
    else:
        count, seed = cfg.data.eval_sequences, cfg.data.eval_seed
    paths = write_sequences(generate_sequences(cfg.scenario, count, seed), out, cfg.data.format)
    print(f"{len(paths)} sequences written to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tracker", description="Point-cloud single object tracker")
    parser.add_argument("--log-level", default=None)
    commands = parser.add_subparsers(dest="command", required=True)

    def add_common(sub: argparse.ArgumentParser):
        sub.add_argument("--config", help="key = value config file")
        sub.add_argument("--seed", type=int)
        sub.add_argument("--out", help="output directory")
        sub.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")

    train = commands.add_parser("train", help="train a model")
    add_common(train)
    train.add_argument("--checkpoint", help="resume from this checkpoint")
    train.set_defaults(handler=cmd_train)

    evaluate_cmd = commands.add_parser("eval", help="one-pass evaluation")
    add_common(evaluate_cmd)
    evaluate_cmd.add_argument("--checkpoint", required=True)
    evaluate_cmd.add_argument("--strategy", choices=[s.value for s in TemplateStrategy])
    evaluate_cmd.set_defaults(handler=cmd_eval)

    sweep = commands.add_parser("sweep", help="first-frame sparsity sweep")
    add_common(sweep)
    sweep.add_argument("--checkpoint", required=True)
    sweep.add_argument("--strategy", choices=[s.value for s in TemplateStrategy])
    sweep.set_defaults(handler=cmd_sweep)

    ablate = commands.add_parser("ablate", help="train and evaluate a matrix of variants")
    add_common(ablate)
    ablate.add_argument("matrix", help="one 'name: key=value, ...' line per variant")
    ablate.add_argument("--repeats", type=int, default=3, help="seeds per variant")
    ablate.set_defaults(handler=cmd_ablate)

    generate = commands.add_parser("generate", help="write synthetic sequence files")
    add_common(generate)
    generate.add_argument("--split", choices=["train", "eval"], default="train")
    generate.add_argument("--format", choices=["text", "binary"])
    generate.set_defaults(handler=cmd_generate)
    return parser


def main(argv: Seq[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        return args.handler(args)
    except (ConfigError, DataError, NumericError) as e:
        logger.error("%s failed: %s", args.command, e)
        if isinstance(e, NumericError) and e.diagnostics:
            logger.error("diagnostics: %s", e.diagnostics)
        return exit_code_for(e)


if __name__ == "__main__":
    sys.exit(main())
