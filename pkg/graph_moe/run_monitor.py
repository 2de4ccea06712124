import datetime
import enum
from typing import Optional

from prometheus_client import Enum, Gauge

run_start_time = Gauge(
    "graph_moe_run_start_unixtime",
    "Time the current command was started"
)


class RunStage(enum.Enum):
    LOADING_CONFIG = "01_loading_config"
    LOADING_DATASET = "02_loading_dataset"
    WRITING_MANIFEST = "03_writing_manifest"
    TRAINING = "10_training"
    VERIFYING_THEORY = "11_verifying_theory"
    GENERATING_DATASET = "12_generating_dataset"
    EXPORTING = "13_exporting"
    WRITING_OUTPUTS = "20_writing_outputs"
    DONE = "30_done"
    FAILED = "31_failed"


run_stage = Enum(
    "graph_moe_run_stage",
    "Current stage of the running command",
    states=[stage.value for stage in RunStage]
)
run_stage_latest_change = Gauge(
    "graph_moe_run_stage_change_unixtime",
    "Time that the run stage last changed"
)
run_stage_duration = Gauge(
    "graph_moe_run_stage_duration_seconds",
    "Time the command spent in the given stage",
    labelnames=["stage"]
)
for stage in RunStage:
    run_stage_duration.labels(stage=stage.value)


class RunMonitor:
    def __init__(self) -> None:
        self.current_stage: Optional[RunStage] = None
        self.current_stage_start: Optional[datetime.datetime] = None
        run_start_time.set_to_current_time()

    def set_stage(self, stage: RunStage) -> None:
        if self.current_stage is not None:
            last_duration = self.current_duration()
            if last_duration is not None:
                run_stage_duration.labels(stage=self.current_stage.value).set(last_duration)
        run_stage.state(stage.value)
        run_stage_latest_change.set_to_current_time()
        self.current_stage = stage
        self.current_stage_start = datetime.datetime.now()

    def current_duration(self) -> Optional[float]:
        if self.current_stage_start is None:
            return None
        return (datetime.datetime.now() - self.current_stage_start).total_seconds()
