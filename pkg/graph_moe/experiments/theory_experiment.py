import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from graph_moe.experiments.experiment import Experiment, write_json
from graph_moe.run_monitor import RunMonitor, RunStage
from graph_moe.theory import run_theory_suite

logger = logging.getLogger(__name__)


class TheoryExperiment(Experiment):
    command = "verify-theory"

    def __init__(
            self,
            out_dir: Union[str, Path],
            instances: int = 100,
            seed: int = 0,
            resolution: int = 100,
            monitor: Optional[RunMonitor] = None,
    ) -> None:
        super().__init__(out_dir, monitor)
        self.instances = instances
        self.seed = seed
        self.resolution = resolution

    def manifest_config(self) -> Dict[str, Any]:
        return {"instances": self.instances, "seed": self.seed, "resolution": self.resolution}

    def seed_list(self) -> List[int]:
        return [self.seed]

    def execute(self) -> bool:
        self.monitor.set_stage(RunStage.VERIFYING_THEORY)
        report = run_theory_suite(self.instances, self.seed, self.resolution)
        self.monitor.set_stage(RunStage.WRITING_OUTPUTS)
        write_json(self.record_output(self.out_dir / "theory_report.json"), report.to_json())
        if not report.passed:
            logger.error("Theory checks failed, %s failing instances written to the report", len(report.failures))
        return report.passed
