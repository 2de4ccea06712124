import asyncio
import logging
from concurrent.futures import Executor
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from graph_moe.graph_data import GraphDataset, SplitSpec
from graph_moe.model import GraphMoEModel, model_forward
from graph_moe.rng import RngState
from graph_moe.tasks.task import Task, TaskException
from graph_moe.train import TrainHistory, train
from graph_moe.train_config import TrainConfig

logger = logging.getLogger(__name__)


@dataclass
class SeedOutcome:
    seed: int
    variant: str
    test_accuracy: float
    val_accuracy: float
    history: TrainHistory
    block_entropies: List[float]
    block_mean_weights: List[List[float]]
    predictions: np.ndarray
    split: SplitSpec


def run_seed(dataset: GraphDataset, split: SplitSpec, cfg: TrainConfig, progress: bool = True) -> SeedOutcome:
    model = GraphMoEModel.build(cfg, dataset.num_features, dataset.num_classes, RngState(cfg.seed))
    result = train(model, dataset, split, cfg, progress=progress)
    final = model_forward(result.model, dataset, RngState(cfg.seed), training=False)
    return SeedOutcome(
        cfg.seed,
        cfg.variant,
        result.test_accuracy,
        result.val_accuracy,
        result.history,
        result.block_entropies,
        [weights.tolist() for weights in result.block_mean_weights],
        np.argmax(final.logits.value, axis=1),
        split,
    )


class TrainSeedTask(Task[SeedOutcome]):

    def __init__(self, dataset: GraphDataset, split: SplitSpec, cfg: TrainConfig) -> None:
        super().__init__(description=f"Train {cfg.variant} on {dataset.name}, seed {cfg.seed}")
        self.dataset = dataset
        self.split = split
        self.cfg = cfg

    async def run(self, executor: Optional[Executor] = None) -> SeedOutcome:
        try:
            if executor is None:
                return run_seed(self.dataset, self.split, self.cfg)
            loop = asyncio.get_running_loop()
            return await loop.run_in_executor(executor, run_seed, self.dataset, self.split, self.cfg, False)
        except Exception as e:
            logger.error("Training task failed: %s", self, exc_info=e)
            raise TaskException(f"Training failed for seed {self.cfg.seed} ({self.cfg.variant}): {e}") from e

    def _task_args(self) -> Dict[str, object]:
        return {"dataset": self.dataset.name, "variant": self.cfg.variant, "seed": self.cfg.seed}
