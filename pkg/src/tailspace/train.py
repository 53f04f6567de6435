"""AdamW training loop with linear-warmup cosine schedule and per-step metrics."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import ToyModel, backward, forward, loss


@dataclass
class TrainConfig:
    learning_rate: float = 2e-5
    batch_size: int = 128
    epochs: int = 1
    warmup_ratio: float = 0.03
    weight_decay: float = 0.0
    schedule: str = "cosine"
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    # caps the run at a fixed number of optimizer steps, reshuffling each pass
    max_steps: int | None = None

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ValueError("; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        if not self.learning_rate >= 0:
            out.append(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0 <= self.warmup_ratio < 1:
            out.append(f"warmup_ratio must be in [0, 1), got {self.warmup_ratio}")
        if self.batch_size < 1:
            out.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            out.append(f"epochs must be >= 1, got {self.epochs}")
        if self.schedule != "cosine":
            out.append(f"only the cosine schedule is supported, got {self.schedule!r}")
        if self.max_steps is not None and self.max_steps < 1:
            out.append(f"max_steps must be >= 1, got {self.max_steps}")
        return out

    def total_steps(self, n_samples: int) -> int:
        if self.max_steps is not None:
            return self.max_steps
        return self.epochs * math.ceil(n_samples / self.batch_size)


def lr_at(config: TrainConfig, step: int, total_steps: int) -> float:
    """Linear warmup over ``ceil(warmup_ratio * total)`` steps, then cosine decay to 0."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    lr = config.learning_rate
    warmup = math.ceil(config.warmup_ratio * total_steps)
    if step < warmup:
        return lr * step / warmup
    progress = (step - warmup) / max(total_steps - warmup, 1)
    return lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(0, {k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               state: AdamState, lr_t: float, config: TrainConfig) -> AdamState:
    """In-place AdamW update (decoupled weight decay applied before the Adam delta)."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for tensor {name!r} at optimizer step {state.step + 1}")
        if params[name].shape != g.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter has {params[name].shape}")
    state.step += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for name, g in grads.items():
        p = params[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if config.weight_decay:
            p *= 1.0 - lr_t * config.weight_decay
        p -= lr_t * (m / bc1) / (np.sqrt(v / bc2) + config.adam_eps)
    return state


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


@dataclass
class StepRecord:
    step: int
    lr: float
    loss: float
    grad_norm: float


@dataclass
class MetricLog:
    records: list[StepRecord] = field(default_factory=list)
    final_loss: float = float("nan")

    @property
    def steps(self) -> int:
        return len(self.records)

    @property
    def final_grad_norm(self) -> float:
        return self.records[-1].grad_norm if self.records else float("nan")

    def summary(self) -> dict:
        return {"final_loss": self.final_loss, "steps": self.steps,
                "final_grad_norm": self.final_grad_norm,
                "last_step_loss": self.records[-1].loss if self.records else None}

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "lr", "loss", "grad_norm"])
            for r in self.records:
                w.writerow([r.step, repr(r.lr), repr(r.loss), repr(r.grad_norm)])

    def write_summary(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)

    def write_plot_data(self, path: str | os.PathLike) -> None:
        """Column-oriented, step-indexed JSON for external plotting tools."""
        cols = {k: [getattr(r, k) for r in self.records] for k in ("step", "lr", "loss", "grad_norm")}
        with open(path, "w") as fh:
            json.dump(cols, fh)

    @classmethod
    def read_csv(cls, path: str | os.PathLike) -> "MetricLog":
        log = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                log.records.append(StepRecord(int(row["step"]), float(row["lr"]),
                                              float(row["loss"]), float(row["grad_norm"])))
        return log


@dataclass
class TaskData:
    inputs: np.ndarray  # d_in x N
    targets: np.ndarray  # d_out x N, or N integer labels

    @property
    def size(self) -> int:
        return self.inputs.shape[1]

    def take(self, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.targets.ndim == 1:
            return self.inputs[:, idx], self.targets[idx]
        return self.inputs[:, idx], self.targets[:, idx]


def evaluate(model: ToyModel, data: TaskData) -> float:
    out, _ = forward(model, data.inputs)
    return loss(out, data.targets)


def _batches(n: int, config: TrainConfig, rng: np.random.Generator):
    while True:
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            yield order[start:start + config.batch_size]


def run_training(model: ToyModel, data: TaskData, config: TrainConfig,
                 state: AdamState | None = None) -> MetricLog:
    """Train ``model`` in place and return its per-step metric log.

    ``final_loss`` in the log is the loss on the whole of ``data`` after the
    last step.
    """
    if data.inputs.shape[0] != model.d_in:
        raise ValueError(f"data has input dim {data.inputs.shape[0]}, model expects {model.d_in}")
    params = model.parameters()
    state = state or AdamState.zeros_like(params)
    rng = np.random.default_rng(config.seed)
    total = config.total_steps(data.size)
    log = MetricLog()
    batches = _batches(data.size, config, rng)
    for k in range(total):
        idx = next(batches)
        x, y = data.take(idx)
        out, cache = forward(model, x)
        try:
            value = loss(out, y)
        except FloatingPointError as exc:
            raise FloatingPointError(f"non-finite loss at step {k + 1}: {exc}") from exc
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite loss at step {k + 1}")
        grads = backward(model, cache, y)
        lr_t = lr_at(config, k, total)
        log.records.append(StepRecord(k + 1, lr_t, value, global_norm(grads)))
        adamw_step(params, grads, state, lr_t, config)
        model.mark_updated()
    log.final_loss = evaluate(model, data)
    return log


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
