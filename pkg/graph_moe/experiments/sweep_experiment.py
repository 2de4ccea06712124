import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from graph_moe.experiments.experiment import ResultRow, TrainingExperiment, format_float, summarise, write_csv
from graph_moe.graph_data import GraphDataset
from graph_moe.run_monitor import RunMonitor
from graph_moe.tasks.task_worker import TaskWorker
from graph_moe.train_config import TrainConfig
from graph_moe.variants import apply_variant

logger = logging.getLogger(__name__)

SUMMARY_COLUMNS = [
    "variant", "seeds", "mean_test_accuracy", "std_test_accuracy", "mean_val_accuracy", "std_val_accuracy",
    "mean_route_entropy",
]


class VariantSweepExperiment(TrainingExperiment):
    """Trains each named variant into its own sub-directory and writes a one-row-per-variant summary table."""
    command = "sweep"
    summary_file = "comparison.csv"

    def __init__(
            self,
            out_dir: Union[str, Path],
            dataset: GraphDataset,
            cfg: TrainConfig,
            seeds: List[int],
            worker: TaskWorker,
            variants: List[str],
            temperature: Optional[float] = None,
            dataset_dir: Optional[Union[str, Path]] = None,
            monitor: Optional[RunMonitor] = None,
    ) -> None:
        super().__init__(out_dir, dataset, cfg, seeds, worker, dataset_dir, monitor)
        self.variants = variants
        # Resolved up front so a bad name fails before any training
        self.variant_configs = [apply_variant(cfg, name, temperature) for name in variants]

    def manifest_config(self) -> Dict[str, Any]:
        return {**self.cfg.to_json(), "variants": self.variants}

    def execute(self) -> bool:
        summary_rows = []
        for variant_cfg in self.variant_configs:
            outcomes = self.train_variant(variant_cfg, self.out_dir / variant_cfg.variant)
            rows = [ResultRow.from_outcome(self.dataset.name, outcome) for outcome in outcomes]
            summary = summarise(rows)
            summary_rows.append({
                "variant": variant_cfg.variant,
                "seeds": len(rows),
                "mean_test_accuracy": format_float(summary["mean_test_accuracy"]),
                "std_test_accuracy": format_float(summary["std_test_accuracy"]),
                "mean_val_accuracy": format_float(summary["mean_val_accuracy"]),
                "std_val_accuracy": format_float(summary["std_val_accuracy"]),
                "mean_route_entropy": format_float(summary["mean_route_entropy"]),
            })
        write_csv(self.record_output(self.out_dir / self.summary_file), SUMMARY_COLUMNS, summary_rows)
        return True


class AblationExperiment(VariantSweepExperiment):
    command = "ablate"
    summary_file = "ablation.csv"


class RoutingComparisonExperiment(VariantSweepExperiment):
    command = "compare-routing"
    summary_file = "comparison.csv"
