import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from graph_moe.experiments.experiment import TrainingExperiment, format_float, write_csv
from graph_moe.experts import EXPERT_ORDER, ExpertKind
from graph_moe.graph_data import GraphDataset, HomophilyProfile, partition_subspaces
from graph_moe.run_monitor import RunMonitor
from graph_moe.tasks.task_worker import TaskWorker
from graph_moe.tasks.train_seed_task import SeedOutcome
from graph_moe.train_config import TrainConfig
from graph_moe.variants import apply_variant

logger = logging.getLogger(__name__)

SUBSPACE_COLUMNS = [
    "homophily_bin", "degree_bin", "homophily_low", "homophily_high", "degree_low", "degree_high",
    "node_count", "test_count",
] + [f"acc_{kind.value}" for kind in EXPERT_ORDER] + ["winner"]


def scheme_accuracies(
        profile: HomophilyProfile,
        labels: np.ndarray,
        outcomes: List[SeedOutcome],
        subspace_id: int,
) -> Tuple[int, Optional[float]]:
    """Correct-prediction rate on the subspace's test nodes, pooled over seeds."""
    members = profile.subspace == subspace_id
    correct = 0
    total = 0
    for outcome in outcomes:
        test_nodes = outcome.split.test[members[outcome.split.test]]
        total += test_nodes.size
        correct += int(np.sum(outcome.predictions[test_nodes] == labels[test_nodes]))
    if total == 0:
        return 0, None
    return total, correct / total


class SubspaceExperiment(TrainingExperiment):
    """
    Trains one single-expert model per encoding scheme and compares them inside each (homophily, degree)
    subspace of the graph.
    """
    command = "observe-subspaces"

    def __init__(
            self,
            out_dir: Union[str, Path],
            dataset: GraphDataset,
            cfg: TrainConfig,
            seeds: List[int],
            worker: TaskWorker,
            homophily_bins: int = 5,
            degree_bins: int = 3,
            dataset_dir: Optional[Union[str, Path]] = None,
            monitor: Optional[RunMonitor] = None,
    ) -> None:
        super().__init__(out_dir, dataset, cfg, seeds, worker, dataset_dir, monitor)
        self.profile = partition_subspaces(dataset, homophily_bins, degree_bins)

    def manifest_config(self) -> Dict[str, Any]:
        return {
            **self.cfg.to_json(),
            "homophily_bins": self.profile.homophily_bins,
            "degree_bins": self.profile.degree_bins,
        }

    def scheme_config(self, kind: ExpertKind) -> TrainConfig:
        """
        The scheme on its own: routing forced onto one expert, with no initial residual and no EFFN, so the
        block output carries only what that encoding scheme makes of the node's neighbourhood.
        """
        scheme_cfg = apply_variant(self.cfg, f"single-{kind.value.lower()}")
        return scheme_cfg.replace(adaptive_residual=False, use_effn=False)

    def execute(self) -> bool:
        scheme_outcomes: Dict[ExpertKind, List[SeedOutcome]] = {}
        for kind in EXPERT_ORDER:
            scheme_cfg = self.scheme_config(kind)
            scheme_outcomes[kind] =self.train_variant(scheme_cfg, self.out_dir / scheme_cfg.variant)

        rows = []
        for subspace_id in range(self.profile.num_subspaces):
            h_bin, d_bin = divmod(subspace_id, self.profile.degree_bins)
            h_low, h_high, d_low, d_high = self.profile.bin_bounds(subspace_id)
            row = {
                "homophily_bin": h_bin,
                "degree_bin": d_bin,
                "homophily_low": format_float(h_low),
                "homophily_high": format_float(h_high),
                "degree_low": format_float(d_low),
                "degree_high": format_float(d_high),
                "node_count": int(self.profile.members(subspace_id).size),
            }
            best_kind = None
            best_acc = -1.0
            test_count = 0
            for kind in EXPERT_ORDER:
                test_count, acc = scheme_accuracies(
                    self.profile, self.dataset.labels, scheme_outcomes[kind], subspace_id
                )
                row[f"acc_{kind.value}"] = format_float(acc)
                # strict comparison keeps the first scheme in order on ties
                if acc is not None and acc > best_acc:
                    best_kind, best_acc = kind, acc
            row["test_count"] = test_count
            row["winner"] = best_kind.value if best_kind is not None else ""
            if best_kind is None and row["node_count"]:
                logger.warning("Subspace %s has nodes but no test nodes, no winner", subspace_id)
            rows.append(row)
        write_csv(self.record_output(self.out_dir / "subspaces.csv"), SUBSPACE_COLUMNS, rows)
        return True
