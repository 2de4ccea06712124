from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from graph_moe.experiments.experiment import Experiment
from graph_moe.graph_data import generate_mixed_sbm, generate_sbm, make_splits, save_dataset
from graph_moe.rng import RngState
from graph_moe.run_monitor import RunMonitor, RunStage
from graph_moe.utils import parse_seeds


class GenerateExperiment(Experiment):
    """Writes a synthetic block-model dataset directory, with stored splits for the given seeds."""
    command = "generate"

    def __init__(
            self,
            out_dir: Union[str, Path],
            nodes: int,
            classes: int,
            p_in: float,
            p_out: float,
            features: int,
            noise: float = 1.0,
            mixed: bool = False,
            seed: int = 0,
            split_seeds: str = "0..9",
            monitor: Optional[RunMonitor] = None,
    ) -> None:
        super().__init__(out_dir, monitor)
        self.nodes = nodes
        self.classes = classes
        self.p_in = p_in
        self.p_out = p_out
        self.features = features
        self.noise = noise
        self.mixed = mixed
        self.seed = seed
        self.split_seeds = parse_seeds(split_seeds)

    def manifest_config(self) -> Dict[str, Any]:
        return {
            "nodes": self.nodes,
            "classes": self.classes,
            "p_in": self.p_in,
            "p_out": self.p_out,
            "features": self.features,
            "noise": self.noise,
            "mixed": self.mixed,
        }

    def seed_list(self) -> List[int]:
        return [self.seed]

    def execute(self) -> bool:
        self.monitor.set_stage(RunStage.GENERATING_DATASET)
        generator = generate_mixed_sbm if self.mixed else generate_sbm
        dataset = generator(
            self.nodes, self.classes, self.p_in, self.p_out, self.features, self.noise, RngState(self.seed)
        )
        splits = [make_splits(dataset, seed=split_seed) for split_seed in self.split_seeds]
        self.monitor.set_stage(RunStage.WRITING_OUTPUTS)
        save_dataset(dataset, self.out_dir, splits)
        for filename in ("meta.json", "edges.tsv", "features.bin", "labels.tsv", "splits.json"):
            self.record_output(self.out_dir / filename)
        return True
