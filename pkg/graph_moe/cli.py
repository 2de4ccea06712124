import argparse
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

from graph_moe._version import __VERSION__
from graph_moe.experiments.experiment import Experiment
from graph_moe.experiments.export_routing_experiment import ExportRoutingExperiment
from graph_moe.experiments.generate_experiment import GenerateExperiment
from graph_moe.experiments.subspace_experiment import SubspaceExperiment
from graph_moe.experiments.sweep_experiment import AblationExperiment, RoutingComparisonExperiment
from graph_moe.experiments.theory_experiment import TheoryExperiment
from graph_moe.experiments.train_experiment import TrainExperiment
from graph_moe.experts import PropagationKind
from graph_moe.graph_data import load_dataset
from graph_moe.run_monitor import RunMonitor, RunStage
from graph_moe.tasks.task_worker import TaskWorker
from graph_moe.train_config import ConfigException, TrainConfig
from graph_moe.utils import parse_seeds
from graph_moe.variants import ABLATIONS, ROUTING_VARIANTS, apply_variant, expand_variants

logger = logging.getLogger(__name__)

EXIT_FAILURE = 1
EXIT_USAGE = 2

# CLI flag -> TrainConfig field
TRAIN_FLAG_FIELDS = {
    "prop": "prop",
    "blocks": "blocks",
    "hidden": "hidden",
    "lr": "lr",
    "dropout": "dropout",
    "weight_decay": "weight_decay",
    "lambda_route": "lambda_route",
    "epochs": "max_epochs",
    "patience": "patience",
    "gumbel_temperature": "gumbel_temperature",
}


class UsageError(Exception):
    pass


def _add_training_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--data", required=True, help="Dataset directory")
    parser.add_argument("--out", required=True, help="Output directory")
    parser.add_argument("--prop", choices=[kind.value for kind in PropagationKind])
    parser.add_argument("--blocks", type=int)
    parser.add_argument("--hidden", type=int)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--dropout", type=float)
    parser.add_argument("--weight-decay", dest="weight_decay", type=float)
    parser.add_argument("--lambda", dest="lambda_route", type=float, help="Routing entropy weight")
    parser.add_argument("--seeds", default="0..9", help="Inclusive range like 0..9, or a comma list")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--patience", type=int)
    parser.add_argument("--gumbel-temperature", dest="gumbel_temperature", type=float)
    parser.add_argument("--per-node-hr", dest="per_node_hr", action="store_true", default=None)
    parser.add_argument("--preset", help="Named hyper-parameter block from the config file")
    parser.add_argument("--workers", type=int, default=1, help="Parallel seed slots")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="graph_moe", description="Mixture of message-passing experts")
    parser.add_argument("--version", action="version", version=__VERSION__)
    parser.add_argument("--config", default="config.json", help="Config file with defaults and presets")
    commands = parser.add_subparsers(dest="command", required=True)

    train = commands.add_parser("train", help="Train over a list of seeds")
    _add_training_flags(train)
    train.add_argument("--variant", default="full")
    train.add_argument("--temperature", type=float, help="Routing softmax temperature for delta-tau")

    observe = commands.add_parser("observe-subspaces", help="Compare single-scheme models per subspace")
    _add_training_flags(observe)
    observe.add_argument("--homophily-bins", dest="homophily_bins", type=int, default=5)
    observe.add_argument("--degree-bins", dest="degree_bins", type=int, default=3)

    compare = commands.add_parser("compare-routing", help="Compare routing schemes")
    _add_training_flags(compare)
    compare.add_argument("--topk", type=int, help="Only run this k for top-k routing")
    compare.add_argument("--temperature", type=float)

    ablate = commands.add_parser("ablate", help="Run ablation variants")
    _add_training_flags(ablate)
    ablate.add_argument(
        "--variant", default="all",
        help=f"Comma list of variants, or all for {', '.join(ABLATIONS)}",
    )
    ablate.add_argument("--temperature", type=float, help="Routing softmax temperature for delta-tau")

    theory = commands.add_parser("verify-theory", help="Check the closed-form routing update numerically")
    theory.add_argument("--out", required=True)
    theory.add_argument("--instances", type=int, default=100)
    theory.add_argument("--seed", type=int, default=0)
    theory.add_argument("--resolution", type=int, default=100)

    export = commands.add_parser("export-routing", help="Routing weights of two runs side by side")
    export.add_argument("--run", required=True, help="Run directory trained with routing entropy weight > 0")
    export.add_argument("--baseline", required=True, help="Run directory trained with routing entropy weight 0")
    export.add_argument("--out", required=True)

    generate = commands.add_parser("generate", help="Write a synthetic block-model dataset")
    generate.add_argument("--out", required=True)
    generate.add_argument("--nodes", type=int, default=400)
    generate.add_argument("--classes", type=int, default=4)
    generate.add_argument("--p-in", dest="p_in", type=float, default=0.05)
    generate.add_argument("--p-out", dest="p_out", type=float, default=0.005)
    generate.add_argument("--features", type=int, default=16)
    generate.add_argument("--noise", type=float, default=1.0)
    generate.add_argument("--mixed", action="store_true")
    generate.add_argument("--seed", type=int, default=0)
    generate.add_argument("--split-seeds", dest="split_seeds", default="0..9")
    return parser


def load_config(path: str) -> Dict[str, Any]:
    config_path = Path(path)
    if not config_path.is_file():
        logger.warning("No config file at %s, using built-in defaults", config_path)
        return {}
    with open(config_path, "r") as c:
        return json.load(c)


def build_train_config(args: argparse.Namespace, conf: Dict[str, Any]) -> TrainConfig:
    """Built-in defaults, then the config file's train block, then a named preset, then explicit flags."""
    values: Dict[str, Any] = dict(conf.get("train", {}))
    if args.preset:
        presets = conf.get("presets", {})
        if args.preset not in presets:
            raise UsageError(f"Unknown preset \"{args.preset}\", known presets: {sorted(presets)}")
        values.update(presets[args.preset])
    for flag, field_name in TRAIN_FLAG_FIELDS.items():
        value = getattr(args, flag, None)
        if value is not None:
            values[field_name] = value
    if args.per_node_hr:
        values["per_node_hr"] = True
    return TrainConfig.from_json(values)


def _routing_variants(topk: Optional[int]) -> List[str]:
    if topk is None:
        return list(ROUTING_VARIANTS)
    return [name for name in ROUTING_VARIANTS if not name.startswith("topk-")] + [f"topk-{topk}"]


def build_experiment(args: argparse.Namespace, conf: Dict[str, Any], monitor: RunMonitor) -> Experiment:
    if args.command == "verify-theory":
        return TheoryExperiment(args.out, args.instances, args.seed, args.resolution, monitor=monitor)
    if args.command == "export-routing":
        return ExportRoutingExperiment(args.out, args.run, args.baseline, monitor=monitor)
    if args.command == "generate":
        try:
            return GenerateExperiment(
                args.out, args.nodes, args.classes, args.p_in, args.p_out, args.features, args.noise, args.mixed,
                args.seed, args.split_seeds, monitor=monitor,
            )
        except ValueError as e:
            raise UsageError(str(e))

    monitor.set_stage(RunStage.LOADING_CONFIG)
    cfg = build_train_config(args, conf)
    try:
        seeds = parse_seeds(args.seeds)
    except ValueError as e:
        raise UsageError(str(e))
    if args.workers < 1:
        raise UsageError(f"--workers must be at least 1, got {args.workers}")
    if args.command == "train":
        cfg = apply_variant(cfg, args.variant, args.temperature)
    elif args.command == "ablate":
        variants = expand_variants([name.strip() for name in args.variant.split(",") if name.strip()])
    elif args.command == "compare-routing":
        variants = _routing_variants(args.topk)
    monitor.set_stage(RunStage.LOADING_DATASET)
    dataset = load_dataset(args.data)

    worker = TaskWorker.with_workers(args.workers)
    common = dict(dataset_dir=args.data, monitor=monitor)
    try:
        if args.command == "train":
            return TrainExperiment(args.out, dataset, cfg, seeds, worker, **common)
        if args.command == "observe-subspaces":
            return SubspaceExperiment(
                args.out, dataset, cfg, seeds, worker, args.homophily_bins, args.degree_bins, **common
            )
        if args.command == "compare-routing":
            return RoutingComparisonExperiment(
                args.out, dataset, cfg, seeds, worker, variants, args.temperature, **common
            )
        if args.command == "ablate":
            return AblationExperiment(args.out, dataset, cfg, seeds, worker, variants, args.temperature, **common)
    except Exception:
        worker.shutdown()
        raise
    worker.shutdown()
    raise UsageError(f"Unknown command {args.command}")


def dispatch(args: argparse.Namespace, conf: Dict[str, Any]) -> int:
    monitor = RunMonitor()
    try:
        experiment = build_experiment(args, conf, monitor)
    except (UsageError, ConfigException) as e:
        logger.error("Usage error: %s", e)
        return EXIT_USAGE
    except Exception as e:
        logger.error("Failed to set up %s", args.command, exc_info=e)
        return EXIT_FAILURE
    try:
        return experiment.run()
    except Exception as e:
        logger.error("Command %s failed", args.command, exc_info=e)
        return EXIT_FAILURE
    finally:
        worker = getattr(experiment, "worker", None)
        if worker is not None:
            worker.shutdown()


def run(argv: Optional[List[str]] = None, conf: Optional[Dict[str, Any]] = None) -> int:
    """Parses and runs one command. argparse usage errors exit with 2 through SystemExit."""
    args = build_parser().parse_args(argv)
    if conf is None:
        conf = load_config(args.config)
    return dispatch(args, conf)
