"""Run configuration, the training loop, and checkpoint evaluation."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .blocks import cosine_lr
from .data import Dataset, load_idx, make_synthetic
from .errors import ConfigError, FormatError, NumericsError
from .executor import CONCURRENT, SEQUENTIAL_SIM, DistributedExecutor, ExecutionMode
from .model import HSViTModel, ModelConfig, load_checkpoint, save_checkpoint

METRICS_HEADER = "epoch,step,lr,loss,accuracy"

_SYNTHETIC_KEYS = {"kind", "num_classes", "n", "size", "seed", "noise_std"}
_IDX_KEYS = {"kind", "images", "labels", "split"}


def _validate_data_spec(spec) -> dict:
    if not isinstance(spec, dict):
        raise ConfigError(f"data must be a mapping, got {type(spec).__name__}")
    kind = spec.get("kind")
    if kind == "synthetic":
        unknown = set(spec) - _SYNTHETIC_KEYS
        missing = {"num_classes", "n", "size"} - set(spec)
    elif kind == "idx":
        unknown = set(spec) - _IDX_KEYS
        missing = {"images", "labels"} - set(spec)
    else:
        raise ConfigError(f"data.kind must be 'synthetic' or 'idx', got {kind!r}")
    if unknown:
        raise ConfigError(f"unknown data keys: {sorted(unknown)}")
    if missing:
        raise ConfigError(f"missing data keys: {sorted(missing)}")
    return dict(spec)


def build_dataset(spec: dict) -> Dataset:
    spec = _validate_data_spec(spec)
    if spec["kind"] == "synthetic":
        return make_synthetic(
            num_classes=int(spec["num_classes"]),
            n=int(spec["n"]),
            size=int(spec["size"]),
            seed=int(spec.get("seed", 0)),
            noise_std=float(spec.get("noise_std", 0.05)),
        )
    return load_idx(spec["images"], spec["labels"], split=spec.get("split", "train"))


@dataclass
class RunConfig:
    """Everything one training run needs, mirrored 1:1 by the config file."""

    model: ModelConfig
    seed: int
    data: dict
    epochs: int = 300
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-2
    workers: int = 1
    mode: str = SEQUENTIAL_SIM
    out_dir: str = "run_out"

    def __post_init__(self):
        if not isinstance(self.model, ModelConfig):
            raise ConfigError("model must be a ModelConfig")
        self.seed = int(self.seed)
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not math.isfinite(self.lr) or self.lr <= 0:
            raise ConfigError(f"lr must be finite and > 0, got {self.lr}")
        if not math.isfinite(self.weight_decay) or self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if self.mode not in (SEQUENTIAL_SIM, CONCURRENT):
            raise ConfigError(f"mode must be '{SEQUENTIAL_SIM}' or '{CONCURRENT}'")
        self.data = _validate_data_spec(self.data)

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "seed": self.seed,
            "data": dict(self.data),
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "weight_decay": self.weight_decay,
            "workers": self.workers,
            "mode": self.mode,
            "out_dir": self.out_dir,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("run config must be a mapping")
        known = {
            "model", "seed", "data", "epochs", "batch_size", "lr",
            "weight_decay", "workers", "mode", "out_dir",
        }
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        missing = {"model", "seed", "data"} - set(raw)
        if missing:
            raise ConfigError(f"missing run config keys: {sorted(missing)}")
        kwargs = dict(raw)
        kwargs["model"] = ModelConfig.from_dict(raw["model"])
        return cls(**kwargs)


def load_run_config(path: str) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            raw = json.load(handle)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON: {exc}") from exc
    return RunConfig.from_dict(raw)


@dataclass
class TrainReport:
    rows: list = field(default_factory=list)
    checkpoint_path: str = ""
    metrics_path: str = ""
    final_accuracy: float = 0.0


def _check_dataset_matches(config: ModelConfig, dataset: Dataset) -> None:
    height, width = config.input_size
    if (dataset.height, dataset.width) != (height, width):
        raise ConfigError(
            f"model expects {height}x{width} inputs, "
            f"dataset is {dataset.height}x{dataset.width}"
        )
    if dataset.channels != config.in_channels:
        raise ConfigError(
            f"model expects {config.in_channels} channels, "
            f"dataset has {dataset.channels}"
        )
    if int(dataset.labels.max()) >= config.num_classes:
        raise ConfigError(
            f"dataset labels reach {int(dataset.labels.max())}, "
            f"model has {config.num_classes} classes"
        )


def _log_loss(logits: np.ndarray, label: int) -> float:
    peak = logits.max()
    lse = peak + math.log(np.exp(logits - peak).sum())
    return float(lse - logits[label])


def _dataset_metrics(executor: DistributedExecutor, dataset: Dataset):
    """Mean cross-entropy and top-1 accuracy over the whole dataset."""
    total_loss = 0.0
    correct = 0
    for x, y in zip(dataset.images, dataset.labels):
        logits = executor.forward(x)
        total_loss += _log_loss(logits, int(y))
        if int(np.argmax(logits)) == int(y):
            correct += 1
    n = len(dataset)
    return total_loss / n, correct / n


def _abort_on_nan(executor: DistributedExecutor, step: int) -> NumericsError:
    for worker_id, name, p in executor.named_worker_parameters():
        if not np.all(np.isfinite(p.data)):
            return NumericsError(
                f"non-finite parameter '{name}' on worker {worker_id} at step {step}",
                step=step, worker_id=worker_id, param_path=name,
            )
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            return NumericsError(
                f"non-finite gradient for '{name}' on worker {worker_id} at step {step}",
                step=step, worker_id=worker_id, param_path=name,
            )
    return NumericsError(
        f"non-finite loss at step {step} with finite parameters",
        step=step, worker_id=0, param_path="<loss>",
    )


def _write_metrics(path: str, rows: list) -> None:
    lines = [METRICS_HEADER]
    for row in rows:
        lines.append(
            f"{row['epoch']},{row['step']},{row['lr']!r},"
            f"{row['loss']!r},{row['accuracy']!r}"
        )
    with open(path, "w", encoding="utf-8") as handle:
        handle.write("\n".join(lines) + "\n")


def train(run: RunConfig, dataset: Dataset = None) -> TrainReport:
    """Train per the run config and write checkpoint plus metrics CSV.

    Row 0 records the untrained model; each later row has that epoch's
    learning rate, mean per-batch training loss, and end-of-epoch
    accuracy over the full training set.
    """
    if dataset is None:
        dataset = build_dataset(run.data)
    _check_dataset_matches(run.model, dataset)

    model = HSViTModel.build(run.model, seed=run.seed)
    mode = ExecutionMode(mode=run.mode, seed=run.seed)
    os.makedirs(run.out_dir, exist_ok=True)

    rows = []
    with DistributedExecutor(model, run.workers, mode) as executor:
        executor.make_optimizers(run.lr, run.weight_decay)
        init_loss, init_acc = _dataset_metrics(executor, dataset)
        rows.append(
            {"epoch": 0, "step": 0, "lr": run.lr, "loss": init_loss,
             "accuracy": init_acc}
        )

        # data order drawn from its own stream so it cannot collide with init
        order_rng = np.random.default_rng(run.seed + 1)
        global_step = 0
        for epoch in range(run.epochs):
            lr = cosine_lr(epoch, run.epochs, run.lr)
            perm = order_rng.permutation(len(dataset))
            loss_sum = 0.0
            seen = 0
            for lo in range(0, len(dataset), run.batch_size):
                batch = perm[lo:lo + run.batch_size]
                metrics = executor.train_step(
                    dataset.images[batch], dataset.labels[batch], lr
                )
                global_step += 1
                if not math.isfinite(metrics.loss):
                    raise _abort_on_nan(executor, global_step)
                loss_sum += metrics.loss * metrics.samples
                seen += metrics.samples
            _, accuracy = _dataset_metrics(executor, dataset)
            rows.append(
                {"epoch": epoch + 1, "step": global_step, "lr": lr,
                 "loss": loss_sum / seen, "accuracy": accuracy}
            )
        executor.sync_to_model()

    checkpoint_path = os.path.join(run.out_dir, "checkpoint")
    save_checkpoint(model, checkpoint_path)
    metrics_path = os.path.join(run.out_dir, "metrics.csv")
    _write_metrics(metrics_path, rows)
    return TrainReport(
        rows=rows,
        checkpoint_path=checkpoint_path,
        metrics_path=metrics_path,
        final_accuracy=rows[-1]["accuracy"],
    )


def evaluate(target, dataset: Dataset, workers: int = 1,
             mode: str = SEQUENTIAL_SIM) -> float:
    """Top-1 accuracy of a model or checkpoint directory on a dataset."""
    model = target if isinstance(target, HSViTModel) else load_checkpoint(str(target))
    _check_dataset_matches(model.config, dataset)
    with DistributedExecutor(model, workers, ExecutionMode(mode=mode)) as executor:
        correct = 0
        for x, y in zip(dataset.images, dataset.labels):
            logits = executor.forward(x)
            if int(np.argmax(logits)) == int(y):
                correct += 1
    return correct / len(dataset)
