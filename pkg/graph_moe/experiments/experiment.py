import csv
import datetime
import json
import logging
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
from prometheus_client import Counter

from graph_moe._version import __VERSION__
from graph_moe.graph_data import GraphDataset, SplitSpec, load_splits, make_splits
from graph_moe.run_monitor import RunMonitor, RunStage
from graph_moe.tasks.task_worker import TaskWorker
from graph_moe.tasks.train_seed_task import SeedOutcome, TrainSeedTask
from graph_moe.train import METRICS_COLUMNS
from graph_moe.train_config import TrainConfig
from graph_moe.utils import population_std

command_runs = Counter(
    "graph_moe_command_runs_total",
    "Number of times each command was run, by outcome",
    labelnames=["command", "outcome"],
)

logger = logging.getLogger(__name__)


class ExperimentException(Exception):
    pass


def write_json(path: Path, data: Any) -> None:
    with open(path, "w") as f:
        json.dump(data, f, indent=2)
        f.write("\n")


def write_csv(path: Path, columns: Sequence[str], rows: Iterable[Dict[str, Any]]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(columns), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def read_csv(path: Path) -> List[Dict[str, str]]:
    with open(path, "r", newline="") as f:
        return list(csv.DictReader(f))


def format_float(value: Optional[float]) -> str:
    if value is None:
        return ""
    return f"{value:.6f}"


@dataclass
class RunManifest:
    command: str
    config: Dict[str, Any]
    dataset: Optional[Dict[str, Any]]
    seeds: List[int]
    output_dir: str
    timestamp: str
    version: str = __VERSION__
    status: str = "running"
    outputs: List[str] = field(default_factory=list)

    @property
    def path(self) -> Path:
        return Path(self.output_dir) / "manifest.json"

    def write(self) -> None:
        write_json(self.path, asdict(self))

    @classmethod
    def load(cls, run_dir: Union[str, Path]) -> "RunManifest":
        path = Path(run_dir) / "manifest.json"
        if not path.is_file():
            raise ExperimentException(f"No manifest.json in {run_dir}")
        with open(path, "r") as f:
            return cls(**json.load(f))


@dataclass
class ResultRow:
    dataset: str
    variant: str
    seed: int
    test_accuracy: float
    val_accuracy: float
    best_epoch: int
    route_entropy: List[float]

    def __post_init__(self) -> None:
        if not (0.0 <= self.test_accuracy <= 1.0 and 0.0 <= self.val_accuracy <= 1.0):
            raise ExperimentException(f"Accuracy outside [0, 1] in {self}")

    @classmethod
    def from_outcome(cls, dataset_name: str, outcome: SeedOutcome) -> "ResultRow":
        return cls(
            dataset_name,
            outcome.variant,
            outcome.seed,
            outcome.test_accuracy,
            outcome.val_accuracy,
            outcome.history.best_epoch,
            outcome.block_entropies,
        )


def summarise(rows: List[ResultRow]) -> Dict[str, Any]:
    """Mean and population standard deviation over the seeds."""
    test = [row.test_accuracy for row in rows]
    val = [row.val_accuracy for row in rows]
    entropies = [float(np.mean(row.route_entropy)) for row in rows if row.route_entropy]
    return {
        "mean_test_accuracy": float(np.mean(test)),
        "std_test_accuracy": population_std(test),
        "mean_val_accuracy": float(np.mean(val)),
        "std_val_accuracy": population_std(val),
        "mean_route_entropy": float(np.mean(entropies)) if entropies else None,
        "std_formula": "population",
    }


class Experiment(ABC):
    command: str = ""

    def __init__(self, out_dir: Union[str, Path], monitor: Optional[RunMonitor] = None) -> None:
        self.out_dir = Path(out_dir)
        self.monitor = monitor or RunMonitor()
        self.outputs: List[Path] = []

    def manifest_config(self) -> Dict[str, Any]:
        return {}

    def dataset_fingerprint(self) -> Optional[Dict[str, Any]]:
        return None

    def seed_list(self) -> List[int]:
        return []

    @abstractmethod
    def execute(self) -> bool:
        """Runs the command, registering every file written. Returns whether all checks passed."""
        raise NotImplementedError

    def record_output(self, path: Path) -> Path:
        self.outputs.append(path)
        return path

    def run(self) -> int:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.monitor.set_stage(RunStage.WRITING_MANIFEST)
        manifest = RunManifest(
            self.command,
            self.manifest_config(),
            self.dataset_fingerprint(),
            self.seed_list(),
            str(self.out_dir),
            datetime.datetime.now().isoformat(),
        )
        manifest.write()
        logger.info("Running %s into %s", self.command, self.out_dir)
        success = False
        try:
            success = self.execute()
        finally:
            manifest.status = "passed" if success else "failed"
            manifest.outputs = sorted(str(path.relative_to(self.out_dir)) for path in self.outputs)
            manifest.write()
            self.monitor.set_stage(RunStage.DONE if success else RunStage.FAILED)
            command_runs.labels(command=self.command, outcome=manifest.status).inc()
        logger.info("Finished %s, %s outputs written", self.command, len(self.outputs))
        return 0 if success else 1


ROUTING_COLUMNS = ["seed", "block", "expert", "mean_weight"]


class TrainingExperiment(Experiment, ABC):
    """Base for commands that train one or more model variants over a list of seeds."""

    def __init__(
            self,
            out_dir: Union[str, Path],
            dataset: GraphDataset,
            cfg: TrainConfig,
            seeds: List[int],
            worker: TaskWorker,
            dataset_dir: Optional[Union[str, Path]] = None,
            monitor: Optional[RunMonitor] = None,
    ) -> None:
        super().__init__(out_dir, monitor)
        if not seeds:
            raise ExperimentException("At least one seed is needed")
        self.dataset = dataset
        self.cfg = cfg
        self.seeds = seeds
        self.worker = worker
        self.dataset_dir = dataset_dir
        self._splits: Dict[int, SplitSpec] = {}

    def manifest_config(self) -> Dict[str, Any]:
        return self.cfg.to_json()

    def dataset_fingerprint(self) -> Optional[Dict[str, Any]]:
        return self.dataset.fingerprint()

    def seed_list(self) -> List[int]:
        return list(self.seeds)

    def split_for(self, seed: int) -> SplitSpec:
        if seed not in self._splits:
            split = None
            if self.dataset_dir is not None:
                split = load_splits(self.dataset_dir, seed)
            if split is None:
                split = make_splits(self.dataset, seed=seed)
            self._splits[seed] = split
        return self._splits[seed]

    def train_variant(self, cfg: TrainConfig, out_dir: Path) -> List[SeedOutcome]:
        self.monitor.set_stage(RunStage.TRAINING)
        tasks = [
            TrainSeedTask(self.dataset, self.split_for(seed), cfg.replace(seed=seed))
            for seed in self.seeds
        ]
        outcomes = self.worker.run_all(tasks, desc=f"{cfg.variant} seeds")
        self.monitor.set_stage(RunStage.WRITING_OUTPUTS)
        self.write_variant_outputs(cfg, outcomes, out_dir)
        return outcomes

    def write_variant_outputs(self, cfg: TrainConfig, outcomes: List[SeedOutcome], out_dir: Path) -> List[ResultRow]:
        out_dir.mkdir(parents=True, exist_ok=True)
        rows = [ResultRow.from_outcome(self.dataset.name, outcome) for outcome in outcomes]
        results = {
            "dataset": self.dataset.name,
            "variant": cfg.variant,
            "seeds": [row.seed for row in rows],
            **summarise(rows),
            "rows": [asdict(row) for row in rows],
        }
        write_json(self.record_output(out_dir / "results.json"), results)
        for outcome in outcomes:
            seed_dir = out_dir / f"seed_{outcome.seed}"
            seed_dir.mkdir(parents=True, exist_ok=True)
            write_csv(
                self.record_output(seed_dir / "metrics.csv"),
                METRICS_COLUMNS,
                (record.to_row() for record in outcome.history.records),
            )
        routing_rows = []
        for outcome in outcomes:
            for block, weights in enumerate(outcome.block_mean_weights):
                for slot, weight in enumerate(weights):
                    routing_rows.append({
                        "seed": outcome.seed,
                        "block": block,
                        "expert": cfg.experts[slot].value,
                        "mean_weight": f"{weight:.10f}",
                    })
        write_csv(self.record_output(out_dir / "routing.csv"), ROUTING_COLUMNS, routing_rows)
        logger.info(
            "%s on %s: test accuracy %.4f ± %.4f over %s seeds", cfg.variant, self.dataset.name,
            results["mean_test_accuracy"], results["std_test_accuracy"], len(rows),
        )
        return rows
