"""Collapse probing: linear probes on frozen encoders, sequential chains, cyclic chains.

The encoder fingerprint is taken before and after each probe and must not change;
a mismatch raises InvariantViolation.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from .autodiff import ComputeGraph, Tensor
from .errors import InvariantViolation
from .model import EncoderParams, HeadConfig, encode_values, head_logits, init_head
from .objectives import graph_cross_entropy
from .optim import Adam, Schedule
from .tasks import Task
from .training import FineTuneResult, ProbeConfig, TrainingPlan
from .utils import RngStreams

logger = logging.getLogger(__name__)


@dataclass
class ProbeResult:
    probe_task: str
    accuracy: float
    encoder_fingerprint: str
    probe_epochs: int
    history: List[float] = field(default_factory=list)


@dataclass
class ChainStage:
    stage_index: int
    stage_task: str
    probe: ProbeResult
    cycle: Optional[int] = None
    status: str = "ok"


@dataclass
class ChainResult:
    method: str
    seed: int
    stages: List[ChainStage] = field(default_factory=list)

    def accuracies(self) -> List[float]:
        return [s.probe.accuracy for s in self.stages]


def probe(encoder: EncoderParams, task: Task, cfg: ProbeConfig, seed: int) -> ProbeResult:
    """Trains a fresh linear softmax layer on frozen representations; returns best dev accuracy"""
    before = encoder.fingerprint()
    train_x = encode_values(encoder, task.train.tokens)
    dev_x = encode_values(encoder, task.dev.tokens)

    streams = RngStreams(seed, f"probe/{task.task_id}")
    head = init_head(HeadConfig(input_dim=encoder.config.dim, num_classes=task.num_classes, layers=1),
                     streams.probe)
    batch_size = min(cfg.batch_size, len(task.train))
    per_epoch = -(-len(task.train) // batch_size)
    schedule = Schedule(cfg.lr, 0, cfg.epochs * per_epoch, power=0.0, end_lr=cfg.lr)
    optimizer = Adam(head.named_tensors(), schedule, weight_decay=0.0, bias_correction=True)

    history = []
    for _ in range(cfg.epochs):
        order = streams.probe.permutation(len(task.train))
        for start in range(0, len(order), batch_size):
            rows = order[start:start + batch_size]
            graph = ComputeGraph()
            optimizer.zero_grad()
            logits = head_logits(head, Tensor(train_x[rows]), graph, mode="eval")
            graph.backward(graph_cross_entropy(graph, logits, task.train.labels[rows]))
            optimizer.step()
        dev_logits = head_logits(head, Tensor(dev_x), ComputeGraph(), mode="eval").values
        history.append(float(np.mean(np.argmax(dev_logits, axis=-1) == task.dev.labels)))

    after = encoder.fingerprint()
    if after != before:
        logger.error("encoder changed while probing %s: %s -> %s", task.task_id, before[:12], after[:12])
        raise InvariantViolation(f"frozen encoder fingerprint changed while probing {task.task_id}")
    return ProbeResult(task.task_id, max(history) if history else 0.0, before, cfg.epochs, history)


def _fine_tune_stage(plan: TrainingPlan, encoder: EncoderParams, task: Task, method: str,
                     seed: int) -> FineTuneResult:
    result = plan.fine_tune(encoder, task, method, seed)
    if not result.ok:
        logger.warning("stage %s (%s, seed %d) failed at step %s; continuing from its best checkpoint",
                       task.task_id, method, seed, result.failed_step)
    return result


def generalization_probe_matrix(pretrained: EncoderParams, source: Task, probe_tasks: Sequence[Task],
                                methods: Sequence[str], seeds: Sequence[int], plan: TrainingPlan) -> pd.DataFrame:
    """Fine-tune on the source task, then probe every target on the frozen result.

    Rows: method, probe_task, seed, accuracy, status. Method "none" probes the
    pretrained encoder itself. Failed fine-tunes keep their rows with status failed.
    """
    probe_cfg = plan.probe_config()
    rows = []
    for seed in seeds:
        for task in probe_tasks:
            rows.append({"method": "none", "probe_task": task.task_id, "seed": seed,
                         "accuracy": probe(pretrained, task, probe_cfg, seed).accuracy, "status": "ok"})
        for method in methods:
            tuned = _fine_tune_stage(plan, pretrained, source, method, seed)
            for task in probe_tasks:
                if tuned.ok:
                    acc = probe(tuned.encoder, task, probe_cfg, seed).accuracy
                else:
                    acc = float("nan")
                rows.append({"method": method, "probe_task": task.task_id, "seed": seed,
                             "accuracy": acc, "status": tuned.status})
    return pd.DataFrame(rows, columns=["method", "probe_task", "seed", "accuracy", "status"])


def matrix_medians(table: pd.DataFrame) -> pd.DataFrame:
    """Per-cell median over seeds (method x probe_task)"""
    ok = table[table["status"] == "ok"]
    return ok.pivot_table(index="method", columns="probe_task", values="accuracy", aggfunc="median")


def sequential_degradation(pretrained: EncoderParams, source: Task, chain: Sequence[Task], method: str,
                           seeds: Sequence[int], plan: TrainingPlan) -> List[ChainResult]:
    """source -> chain[0] -> chain[1] -> ..., probing the source task after every stage"""
    if any(task.task_id == source.task_id for task in chain):
        raise ValueError("chain tasks must differ from the source task")
    probe_cfg = plan.probe_config()
    results = []
    for seed in seeds:
        chain_result = ChainResult(method, seed)
        encoder = pretrained
        for index, task in enumerate([source, *chain]):
            tuned = _fine_tune_stage(plan, encoder, task, method, seed)
            encoder = tuned.encoder
            chain_result.stages.append(ChainStage(index, task.task_id, probe(encoder, source, probe_cfg, seed),
                                                  status=tuned.status))
        results.append(chain_result)
    return results


def cyclic_retention(pretrained: EncoderParams, cycle: Sequence[Task], cycles: int, method: str,
                     seeds: Sequence[int], plan: TrainingPlan) -> List[ChainResult]:
    """Train on cycle[i], probe cycle[i + 1], around the cycle ``cycles`` times.

    Each task is probed exactly ``cycles`` times; the stage's ``cycle`` field is the
    1-based round in which that probe happened.
    """
    if cycles < 2:
        raise ValueError(f"cyclic retention needs at least 2 cycles, got {cycles}")
    if len(cycle) < 2:
        raise ValueError("a task cycle needs at least two tasks")
    probe_cfg = plan.probe_config()
    width = len(cycle)
    results = []
    for seed in seeds:
        chain_result = ChainResult(method, seed)
        encoder = pretrained
        for index in range(cycles * width):
            task = cycle[index % width]
            target = cycle[(index + 1) % width]
            tuned = _fine_tune_stage(plan, encoder, task, method, seed)
            encoder = tuned.encoder
            chain_result.stages.append(ChainStage(index, task.task_id, probe(encoder, target, probe_cfg, seed),
                                                  cycle=index // width + 1, status=tuned.status))
        results.append(chain_result)
    return results


def chain_frame(results: Sequence[ChainResult]) -> pd.DataFrame:
    rows = []
    for result in results:
        for stage in result.stages:
            rows.append({"method": result.method, "stage_index": stage.stage_index, "stage_task": stage.stage_task,
                         "probe_task": stage.probe.probe_task, "cycle": stage.cycle, "seed": result.seed,
                         "accuracy": stage.probe.accuracy, "status": stage.status})
    return pd.DataFrame(rows, columns=["method", "stage_index", "stage_task", "probe_task", "cycle", "seed",
                                       "accuracy", "status"])


def retention_gap(frame: pd.DataFrame, method: str, baseline: str, cycle: int = 2) -> float:
    """Median over seeds of the task-averaged probe accuracy gap (method - baseline) at ``cycle``"""
    at_cycle = frame[frame["cycle"] == cycle]
    per_seed = at_cycle.groupby(["method", "seed"])["accuracy"].mean().unstack("method")
    return float((per_seed[method] - per_seed[baseline]).median())


def degradation_drop(frame: pd.DataFrame, method: str) -> float:
    """Median over seeds of first-stage minus last-stage source probe accuracy"""
    rows = frame[frame["method"] == method].sort_values(["seed", "stage_index"])
    drops = rows.groupby("seed")["accuracy"].agg(lambda acc: acc.iloc[0] - acc.iloc[-1])
    return float(drops.median())
