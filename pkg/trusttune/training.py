"""Fine-tuning loop shared by every method, plus the per-run training plan.

A run owns copies of the encoder and head. Batches come from a per-epoch
permutation of the data stream, objective noise from the noise stream, and the
fresh head from the init stream. Only the noise stream depends on the method,
which is what makes r3f with lambda = 0 replay standard training exactly.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from .autodiff import CostCounter
from .config import resolve_optim_config
from .errors import NumericError
from .model import EncoderParams, HeadConfig, HeadParams, init_head, predict
from .objectives import Batch, RegularizerConfig, step_loss
from .optim import Adam
from .tasks import Task
from .utils import RngStreams

logger = logging.getLogger(__name__)


@dataclass
class EpochRecord:
    epoch: int
    updates: int
    mean_loss: float
    dev_accuracy: float
    best_dev_accuracy: float
    fp_total: int = 0
    bp_total: int = 0

    @property
    def xfp_total(self) -> int:
        return self.fp_total + 2 * self.bp_total


@dataclass
class FineTuneResult:
    encoder: EncoderParams
    head: HeadParams
    method: str
    task_id: str
    seed: int
    history: List[EpochRecord] = field(default_factory=list)
    cost: CostCounter = field(default_factory=CostCounter)
    status: str = "ok"
    failed_step: Optional[int] = None
    best_epoch: int = 0
    best_dev_accuracy: float = 0.0
    updates: int = 0
    wall_seconds: float = 0.0
    seconds_to_best: float = 0.0

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def accuracy(encoder: EncoderParams, head: HeadParams, tokens: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(predict(encoder, head, tokens) == labels))


def fine_tune(encoder: EncoderParams, head: HeadParams | None, task: Task, cfg: RegularizerConfig,
              optim: Dict[str, Any], seed: int, head_template: HeadConfig | None = None) -> FineTuneResult:
    """Trains copies of encoder and head on task.train; keeps the best dev epoch.

    ``optim`` is a resolved optimizer section (see config.resolve_optim_config).
    A non-finite loss or gradient ends the run with status "failed" at that step.
    """
    streams = RngStreams(seed, f"finetune/{task.task_id}")
    encoder = encoder.copy()
    if head is None:
        template = head_template or HeadConfig(encoder.config.dim, task.num_classes)
        head = init_head(HeadConfig(input_dim=encoder.config.dim, num_classes=task.num_classes,
                                    layers=template.layers, hidden=template.hidden, spectral=cfg.spectral,
                                    train_iters=template.train_iters, eval_iters=template.eval_iters,
                                    init_std=template.init_std), streams.init)
    else:
        head = head.copy()
    encoder.set_trainable(True)

    result = FineTuneResult(encoder.copy(), head.copy(), cfg.method, task.task_id, seed)
    params = {**encoder.named_tensors(), **head.named_tensors()}
    optimizer = Adam.from_config(params, optim)
    batch_size = min(optim["batch_size"], len(task.train))
    per_epoch = math.ceil(len(task.train) / batch_size)
    total = optim["total_updates"]
    epochs = math.ceil(total / per_epoch)

    started = time.perf_counter()
    best = -1.0
    update = 0
    for epoch in range(1, epochs + 1):
        order = streams.data.permutation(len(task.train))
        losses = []
        for start in range(0, len(order), batch_size):
            if update >= total:
                break
            rows = order[start:start + batch_size]
            batch = Batch(task.train.tokens[rows], task.train.labels[rows])
            update += 1
            optimizer.zero_grad()
            try:
                report = step_loss(encoder, head, batch, cfg, streams.noise)
                if not math.isfinite(report.total):
                    raise NumericError(f"non-finite loss {report.total}")
                optimizer.step()
            except NumericError as e:
                logger.error("%s on %s seed %d diverged at step %d: %s", cfg.method, task.task_id, seed, update, e)
                result.status, result.failed_step = "failed", update
                break
            result.cost.fp += report.fp_used
            result.cost.bp += report.bp_used
            losses.append(report.total)
        if result.status == "failed":
            break

        dev_acc = accuracy(encoder, head, task.dev.tokens, task.dev.labels)
        if dev_acc > best:
            best = dev_acc
            result.encoder, result.head = encoder.copy(), head.copy()
            result.best_epoch = epoch
            result.seconds_to_best = time.perf_counter() - started
        result.history.append(EpochRecord(epoch, update, float(np.mean(losses)) if losses else float("nan"),
                                          dev_acc, best, result.cost.fp, result.cost.bp))
        logger.info("%s %s seed %d epoch %d: loss %.4f dev %.4f (best %.4f)", cfg.method, task.task_id, seed,
                    epoch, result.history[-1].mean_loss, dev_acc, best)

    result.updates = update if result.status == "ok" else update - 1
    result.best_dev_accuracy = max(best, 0.0)
    result.wall_seconds = time.perf_counter() - started
    result.encoder.zero_grad()
    result.head.zero_grad()
    return result


@dataclass
class ProbeConfig:
    lr: float = 1e-2
    epochs: int = 20
    batch_size: int = 32

    @classmethod
    def from_section(cls, section: Dict[str, Any]) -> "ProbeConfig":
        return cls(lr=section["lr"], epochs=section["epochs"], batch_size=section["batch_size"])


class TrainingPlan:
    """Derives per-method, per-task training settings from one flat config"""

    def __init__(self, values: Dict[str, Any]):
        self.values = values

    def section(self, name: str) -> Dict[str, Any]:
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self.values.items() if k.startswith(prefix)}

    def regularizer(self, method: str, **overrides: Any) -> RegularizerConfig:
        section = {**self.section("method"), "name": method, **overrides}
        return RegularizerConfig.from_section(section)

    def optim(self, method: str, task_id: str | None = None) -> Dict[str, Any]:
        return resolve_optim_config(self.values, method, task_id)

    def head_template(self) -> HeadConfig:
        model = self.section("model")
        return HeadConfig(input_dim=model["dim"], num_classes=2, layers=model["head_layers"],
                          hidden=model["head_hidden"], train_iters=model["spectral_train_iters"],
                          eval_iters=model["spectral_eval_iters"], init_std=model["init_std"])

    def probe_config(self) -> ProbeConfig:
        return ProbeConfig.from_section(self.section("probe"))

    def fine_tune(self, encoder: EncoderParams, task: Task, method: str, seed: int,
                  reg: RegularizerConfig | None = None) -> FineTuneResult:
        return fine_tune(encoder, None, task, reg or self.regularizer(method), self.optim(method, task.task_id),
                         seed, self.head_template())
