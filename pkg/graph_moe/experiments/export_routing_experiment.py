import logging
from collections import defaultdict
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from graph_moe.experiments.experiment import Experiment, ExperimentException, RunManifest, read_csv, write_csv
from graph_moe.run_monitor import RunMonitor, RunStage

logger = logging.getLogger(__name__)

COMPARE_COLUMNS = ["run", "lambda_route", "block", "expert", "mean_weight"]


def mean_block_weights(run_dir: Path) -> List[Tuple[int, str, float]]:
    """Per (block, expert slot) routing weight averaged over the run's seeds, in block then slot order."""
    routing_path = run_dir / "routing.csv"
    if not routing_path.is_file():
        raise ExperimentException(f"No routing.csv in {run_dir}")
    grouped: Dict[Tuple[int, int], List[float]] = defaultdict(list)
    labels: Dict[Tuple[int, int], str] = {}
    slot_counter: Dict[Tuple[str, int], int] = defaultdict(int)
    for row in read_csv(routing_path):
        seed_block = (row["seed"], int(row["block"]))
        slot = slot_counter[seed_block]
        slot_counter[seed_block] += 1
        key = (int(row["block"]), slot)
        grouped[key].append(float(row["mean_weight"]))
        labels[key] = row["expert"]
    return [(block, labels[(block, slot)], float(np.mean(grouped[(block, slot)]))) for block, slot in sorted(grouped)]


class ExportRoutingExperiment(Experiment):
    """Side-by-side mean routing weights of a regularised run and an unregularised baseline run."""
    command = "export-routing"

    def __init__(
            self,
            out_dir: Union[str, Path],
            run_dir: Union[str, Path],
            baseline_dir: Union[str, Path],
            monitor: Optional[RunMonitor] = None,
    ) -> None:
        super().__init__(out_dir, monitor)
        self.run_dir = Path(run_dir)
        self.baseline_dir = Path(baseline_dir)
        for directory in (self.run_dir, self.baseline_dir):
            if not directory.is_dir():
                raise ExperimentException(f"Run directory {directory} does not exist")

    def manifest_config(self) -> Dict[str, Any]:
        return {"run": str(self.run_dir), "baseline": str(self.baseline_dir)}

    def execute(self) -> bool:
        self.monitor.set_stage(RunStage.EXPORTING)
        rows = []
        for label, directory in (("baseline", self.baseline_dir), ("regularised", self.run_dir)):
            manifest = RunManifest.load(directory)
            lambda_route = manifest.config.get("lambda_route")
            for block, expert, weight in mean_block_weights(directory):
                rows.append({
                    "run": label,
                    "lambda_route": lambda_route,
                    "block": block,
                    "expert": expert,
                    "mean_weight": f"{weight:.10f}",
                })
        write_csv(self.record_output(self.out_dir / "routing_compare.csv"), COMPARE_COLUMNS, rows)
        return True
