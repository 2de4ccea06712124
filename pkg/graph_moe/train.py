import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
from prometheus_client import Counter, Gauge
from tqdm import tqdm

from graph_moe.autodiff.tape import backward
from graph_moe.graph_data import GraphDataset, SplitSpec
from graph_moe.model import GraphMoEModel, accuracy, loss_breakdown, model_forward
from graph_moe.optimizer import OptimizerState, optimizer_step
from graph_moe.rng import RngState
from graph_moe.routing import ENTROPY_LOG_FLOOR, RoutingRecord, check_route_loss, check_routing_record
from graph_moe.train_config import TrainConfig

TRAIN_STREAM = 1

epochs_run = Counter(
    "graph_moe_train_epochs_total",
    "Total number of training epochs run",
    labelnames=["variant"],
)
early_stops = Counter(
    "graph_moe_train_early_stops_total",
    "Number of training runs ended by early stopping",
    labelnames=["variant"],
)
latest_val_accuracy = Gauge(
    "graph_moe_train_val_accuracy",
    "Validation accuracy at the most recent epoch",
)
latest_total_loss = Gauge(
    "graph_moe_train_total_loss",
    "Total training loss at the most recent epoch",
)

logger = logging.getLogger(__name__)


class EarlyStopping:
    """Stops once the monitored value has not improved for `patience` epochs, keeping the best parameters."""

    def __init__(self, patience: int, mode: str = "max", min_delta: float = 0.0) -> None:
        if mode not in ("min", "max"):
            raise ValueError(f"Early stopping mode must be min or max, got {mode}")
        self.patience = patience
        self.mode = mode
        self.min_delta = min_delta
        self.best = float("inf") if mode == "min" else float("-inf")
        self.best_epoch = 0
        self.best_weights: Optional[List[np.ndarray]] = None
        self.wait = 0
        self.stopped_epoch: Optional[int] = None

    def __call__(self, epoch: int, model: GraphMoEModel, current: float) -> bool:
        if self.mode == "min":
            improved = current < self.best - self.min_delta
        else:
            improved = current > self.best + self.min_delta
        if improved:
            self.best = current
            self.best_epoch = epoch
            self.best_weights = model.snapshot()
            self.wait = 0
            return False
        self.wait += 1
        if self.wait >= self.patience:
            self.stopped_epoch = epoch
            return True
        return False

    def restore_best(self, model: GraphMoEModel) -> None:
        if self.best_weights is not None:
            model.restore(self.best_weights)


@dataclass
class EpochRecord:
    epoch: int
    task_loss: float
    route_loss: float
    total_loss: float
    train_acc: float
    val_acc: float
    hr_selection: Optional[int]

    def to_row(self) -> Dict[str, object]:
        return {
            "epoch": self.epoch,
            "task_loss": f"{self.task_loss:.10g}",
            "route_loss": f"{self.route_loss:.10g}",
            "total_loss": f"{self.total_loss:.10g}",
            "train_acc": f"{self.train_acc:.6f}",
            "val_acc": f"{self.val_acc:.6f}",
            "hr_selection": "" if self.hr_selection is None else self.hr_selection,
        }


METRICS_COLUMNS = ["epoch", "task_loss", "route_loss", "total_loss", "train_acc", "val_acc", "hr_selection"]


@dataclass
class TrainHistory:
    records: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: Optional[int] = None

    def __len__(self) -> int:
        return len(self.records)


@dataclass
class TrainResult:
    model: GraphMoEModel
    history: TrainHistory
    test_accuracy: float
    val_accuracy: float
    block_entropies: List[float]
    block_mean_weights: List[np.ndarray]


def record_entropy(record: RoutingRecord) -> float:
    probs = record.values
    return float(-np.mean(np.sum(probs * np.log(np.maximum(probs, ENTROPY_LOG_FLOOR)), axis=1)))


def train(
        m: GraphMoEModel,
        g: GraphDataset,
        splits: SplitSpec,
        cfg: TrainConfig,
        progress: bool = True,
) -> TrainResult:
    splits.validate(g)
    rng = RngState(cfg.seed).fork(TRAIN_STREAM)
    eval_rng = RngState(cfg.seed)
    state = OptimizerState()
    stopper = EarlyStopping(cfg.patience, mode="max")
    history = TrainHistory()
    params = m.parameters()
    num_experts = len(cfg.experts)
    logger.info("Training %s on %s for up to %s epochs", cfg, g.name, cfg.max_epochs)

    epochs = tqdm(range(1, cfg.max_epochs + 1), desc=f"seed {cfg.seed} {cfg.variant}", disable=not progress, leave=False)
    for epoch in epochs:
        output = model_forward(m, g, rng, training=True)
        for record in output.records:
            check_routing_record(record)
        losses = loss_breakdown(output.logits, g, splits.train, output.records, cfg.lambda_route)
        check_route_loss(losses.route_value, num_experts)
        backward(output.tape, losses.total)
        grads = [output.tape.grad_for(param) for param in params]
        optimizer_step(state, params, grads, cfg.lr, cfg.weight_decay)

        evaluation = model_forward(m, g, eval_rng, training=False)
        train_acc = accuracy(evaluation.logits.value, g.labels, splits.train)
        val_acc = accuracy(evaluation.logits.value, g.labels, splits.val)
        record = EpochRecord(
            epoch,
            float(losses.task.value[0, 0]),
            losses.route_value,
            float(losses.total.value[0, 0]),
            train_acc,
            val_acc,
            output.hr_selection,
        )
        history.records.append(record)
        epochs_run.labels(variant=cfg.variant).inc()
        latest_val_accuracy.set(val_acc)
        latest_total_loss.set(record.total_loss)
        logger.debug(
            "Epoch %s: task %.4f route %.4f train %.3f val %.3f", epoch, record.task_loss, record.route_loss,
            train_acc, val_acc,
        )
        if stopper(epoch, m, val_acc):
            early_stops.labels(variant=cfg.variant).inc()
            logger.info("Early stopping at epoch %s, best val accuracy %.4f at epoch %s", epoch, stopper.best,
                        stopper.best_epoch)
            break

    stopper.restore_best(m)
    history.best_epoch = stopper.best_epoch
    history.stopped_epoch = stopper.stopped_epoch

    final = model_forward(m, g, eval_rng, training=False)
    test_acc = accuracy(final.logits.value, g.labels, splits.test)
    val_acc = accuracy(final.logits.value, g.labels, splits.val)
    logger.info("Finished seed %s: val %.4f, test %.4f, best epoch %s", cfg.seed, val_acc, test_acc,
                history.best_epoch)
    return TrainResult(
        m,
        history,
        test_acc,
        val_acc,
        [record_entropy(record) for record in final.records],
        [record.mean_weights() for record in final.records],
    )
