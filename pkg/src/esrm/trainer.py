"""One-pass online continual learning loop for ESRM and experience replay (ER)."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import buffer as membuf
from .data import AugmentationPolicy, Sample, Task, TaskSequence, augment_images, labels_tensor, samples_to_tensor, stream
from .losses import LossWeights, ce_pair, match_loss, rm_loss, sdc_loss, split_by_entropy, total_loss
from .metrics import AccuracyMatrix, evaluate_accuracy
from .model import LearnerModel, entropy, inference_mode, save_checkpoint

log = logging.getLogger(__name__)

METHODS = ("esrm", "er")
OPTIMIZERS = ("sgd", "adamw")
COMPOSITION_EVERY = 10


@dataclass(frozen=True)
class TrainConfig:
    stream_batch: int = 10
    mem_batch: int = 64
    buffer_capacity: int = 1000
    method: str = "esrm"
    mem_strategy: str = "es"
    optimizer: str = "sgd"
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    augmentation: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    backbone: str = "resnet18"
    backbone_width: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.stream_batch < 2:
            raise ValueError("stream_batch must be at least 2")
        if self.mem_batch < 0:
            raise ValueError("mem_batch must be non-negative")
        if self.buffer_capacity <= 0:
            raise ValueError("buffer_capacity must be positive")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.mem_strategy not in membuf.STRATEGIES:
            raise ValueError(f"mem_strategy must be one of {membuf.STRATEGIES}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


@dataclass
class TrainLog:
    steps: list[dict] = field(default_factory=list)
    composition: list[dict] = field(default_factory=list)
    evaluations: list[dict] = field(default_factory=list)

    def losses(self, key: str = "total") -> list[float]:
        return [s[key] for s in self.steps]

    def write(self, path: str | Path) -> None:
        with Path(path).open("w") as fh:
            for kind, rows in (("step", self.steps), ("composition", self.composition), ("evaluation", self.evaluations)):
                for row in rows:
                    fh.write(json.dumps({"kind": kind, **row}) + "\n")

    @classmethod
    def read(cls, path: str | Path) -> "TrainLog":
        out = cls()
        target = {"step": out.steps, "composition": out.composition, "evaluation": out.evaluations}
        with Path(path).open() as fh:
            for line in fh:
                if line.strip():
                    row = json.loads(line)
                    target[row.pop("kind")].append(row)
        return out


def build_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    return torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)


class OnlineTrainer:
    """Owns the model, the replay buffer, the optimizer and all random streams of one run."""

    def __init__(self, model: LearnerModel, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        self.buffer = membuf.MemoryBuffer(cfg.buffer_capacity, cfg.mem_strategy)
        self.optimizer = build_optimizer(model, cfg)
        mem_ss, aug_ss, buf_ss, stream_ss = np.random.SeedSequence(cfg.seed).spawn(4)
        self.mem_rng = np.random.default_rng(mem_ss)
        self.aug_rng = np.random.default_rng(aug_ss)
        self.buf_rng = np.random.default_rng(buf_ss)
        self.stream_rng = np.random.default_rng(stream_ss)
        self.iteration = 0
        self.log = TrainLog()

    def _esrm_loss(self, x, x_aug, y, n_new):
        w = self.cfg.loss_weights
        logits, z = self.model.forward_all(x)
        logits_aug = self.model(x_aug)
        ce = ce_pair(logits, logits_aug, y)
        sdc = sdc_loss(logits, logits_aug.detach(), w.t)

        z_new, y_new = z[:n_new], y[:n_new]
        z_mem, y_mem = z[n_new:], y[n_new:]
        if n_new >= 2:
            # split on the current predictions for the stream part of the batch
            plus, minus = split_by_entropy(entropy(logits[:n_new].detach()))
            rm = rm_loss(
                z_new[plus], y_new[plus], z_new[minus], y_new[minus], z_new, y_new, z_mem, y_mem, w.tau, w.rm_reduction
            )
        elif z_mem.shape[0] > 0:
            r = w.rm_reduction
            rm = match_loss(z_new, y_new, z_mem, y_mem, w.tau, r) + match_loss(z_mem, y_mem, z_new, y_new, w.tau, r)
        else:
            rm = z.sum() * 0.0
        return ce, sdc, rm

    def train_step(self, batch: Sequence[Sample], task_index: int = 0) -> dict:
        """One optimizer step on a stream batch plus a replay batch, then a buffer update."""
        cfg = self.cfg
        mem = membuf.sample_memory(self.buffer, cfg.mem_batch, self.mem_rng)
        combined = list(batch) + mem
        x = samples_to_tensor(combined)
        y = labels_tensor(combined)
        x_aug = augment_images(x, cfg.augmentation, self.aug_rng)

        self.model.train()
        self.optimizer.zero_grad(set_to_none=True)
        if cfg.method == "er":
            ce = F.cross_entropy(self.model(x_aug), y)
            sdc = rm = torch.zeros(())
        else:
            ce, sdc, rm = self._esrm_loss(x, x_aug, y, len(batch))
        loss = total_loss(ce, sdc, rm, cfg.loss_weights)
        loss.backward()
        self.optimizer.step()

        with inference_mode(self.model):
            ents = entropy(self.model(x[: len(batch)]))
        membuf.update(self.buffer, batch, ents.numpy(), self.buf_rng)

        self.iteration += 1
        entry = {
            "iteration": self.iteration,
            "task": task_index,
            "total": float(loss.detach()),
            "ce": float(ce.detach()),
            "sdc": float(sdc.detach()),
            "rm": float(rm.detach()),
            "n_stream": len(batch),
            "n_mem": len(mem),
        }
        self.log.steps.append(entry)
        if self.iteration % COMPOSITION_EVERY == 0:
            stats = membuf.composition_stats(self.buffer)
            self.log.composition.append(
                {"iteration": self.iteration, "synthetic_fraction": stats["synthetic_fraction"], "size": stats["size"]}
            )
        return entry

    def train_task(self, task: Task) -> None:
        """Stream a task once; refresh buffer entropies afterwards for the ES strategy."""
        seed = int(self.stream_rng.integers(2**63 - 1))
        for batch in stream(task, self.cfg.stream_batch, seed):
            self.train_step(batch, task.index)
        if self.buffer.strategy == "es":
            membuf.refresh_entropy(self.buffer, self.model)


@dataclass
class ExperimentResult:
    accuracy: AccuracyMatrix
    log: TrainLog
    buffer_snapshot: list[dict]
    model: LearnerModel
    buffer: membuf.MemoryBuffer


def infer_num_classes(tasks: TaskSequence) -> int:
    return 1 + max(max(t.classes) for t in tasks)


def build_model(cfg: TrainConfig, num_classes: int, image_shape: tuple[int, ...]) -> LearnerModel:
    torch.manual_seed(cfg.seed)
    h, w, c = image_shape
    if h != w:
        raise ValueError(f"square images expected, got {h}x{w}")
    return LearnerModel(num_classes, backbone=cfg.backbone, in_channels=c, image_size=h, width=cfg.backbone_width)


def run_experiment(
    cfg: TrainConfig,
    tasks: TaskSequence,
    test_sets: Sequence[Sequence[Sample]],
    num_classes: int | None = None,
    out_dir: str | Path | None = None,
) -> ExperimentResult:
    """Train the task sequence in order, evaluating every task's test set after each task.

    Row ``t`` of the accuracy matrix holds accuracies after task ``t``; entries
    for tasks not yet trained are recorded as well and flagged by
    ``AccuracyMatrix.pre_exposure_mask``.
    """
    if len(test_sets) != len(tasks):
        raise ValueError(f"{len(tasks)} tasks but {len(test_sets)} test sets")
    num_classes = num_classes or infer_num_classes(tasks)
    model = build_model(cfg, num_classes, tasks[0].samples[0].image.shape)
    trainer = OnlineTrainer(model, cfg)
    acc = AccuracyMatrix.empty(len(tasks))
    for t, task in enumerate(tasks):
        trainer.train_task(task)
        row = [evaluate_accuracy(model, test) for test in test_sets]
        acc.values[t] = row
        trainer.log.evaluations.append({"after_task": t, "iteration": trainer.iteration, "accuracies": row})
        log.info("task %d/%d done, accuracies %s", t + 1, len(tasks), np.round(row, 3).tolist())

    result = ExperimentResult(
        accuracy=acc,
        log=trainer.log,
        buffer_snapshot=trainer.buffer.to_records(),
        model=model,
        buffer=trainer.buffer,
    )
    if out_dir is not None:
        persist_run(result, cfg, out_dir)
    return result


def persist_run(result: ExperimentResult, cfg: TrainConfig, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "accuracy.json").write_text(json.dumps(result.accuracy.tolist()))
    result.log.write(out / "trainlog.jsonl")
    result.buffer.write_snapshot(out / "buffer.jsonl")
    membuf.save_buffer(result.buffer, out / "buffer.npz")
    save_checkpoint(result.model, out / "model.pt", extra={"train_config": config_to_dict(cfg)})


def config_to_dict(cfg: TrainConfig) -> dict:
    return dataclasses.asdict(cfg)
