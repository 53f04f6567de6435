"""Seeded synthetic tasks and the "pretrained" models they start from.

Teacher-student regression: the student is a random network whose weights
have a decaying singular spectrum; the teacher is the same network with a
rank-``teacher_rank`` perturbation added to every target layer, so the gap
to learn is exactly low-rank.  Inputs are drawn from an anisotropic
Gaussian.

Gaussian classes: ``n_classes`` anisotropic clusters with seeded means;
labels are integer class indices.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .calibration import CalibrationSet
from .model import LinearSpec, ToyModel, forward
from .train import TaskData


@dataclass
class ModelSpec:
    d_in: int = 64
    width: int = 64
    d_out: int = 64
    depth: int = 3
    activation: str = "gelu"
    residual: bool = False
    bias: bool = True
    spectrum_decay: float = 8.0
    seed: int = 0

    def layers(self) -> list[LinearSpec]:
        if self.residual:
            if self.d_in != self.d_out:
                raise ValueError("residual models need d_in == d_out")
            out = []
            for i in range(self.depth):
                out.append(LinearSpec(f"up_{i}", self.d_in, self.width, self.bias, self.activation))
                out.append(LinearSpec(f"down_{i}", self.width, self.d_in, self.bias, "identity"))
            return out
        dims = [self.d_in] + [self.width] * (self.depth - 1) + [self.d_out]
        return [
            LinearSpec(f"fc_{i}", dims[i], dims[i + 1], self.bias,
                       self.activation if i < self.depth - 1 else "identity")
            for i in range(self.depth)
        ]


def _rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in keys])


def decaying_matrix(rng: np.random.Generator, d_out: int, d_in: int, decay: float) -> np.ndarray:
    """Random matrix with singular values ``exp(-i / decay)``, rescaled to unit gain."""
    k = min(d_out, d_in)
    u, _ = np.linalg.qr(rng.standard_normal((d_out, k)))
    v, _ = np.linalg.qr(rng.standard_normal((d_in, k)))
    s = np.exp(-np.arange(k) / decay) if decay > 0 else np.ones(k)
    s *= np.sqrt(k) / np.linalg.norm(s)
    return (u * s) @ v.T


def pretrained_model(spec: ModelSpec, seed: int) -> ToyModel:
    model = ToyModel(spec.layers(), spec.residual)
    rng = _rng(spec.seed, seed, 1)
    for s in model.specs:
        model.weights[s.name] = decaying_matrix(rng, s.d_out, s.d_in, spec.spectrum_decay)
        if s.has_bias:
            model.biases[s.name] = 0.1 * rng.standard_normal(s.d_out)
    return model


def input_basis(d: int, decay: float, rng: np.random.Generator) -> np.ndarray:
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    scales = np.exp(-np.arange(d) / decay) if decay > 0 else np.ones(d)
    return q * (scales * np.sqrt(d) / np.linalg.norm(scales))


@dataclass
class TaskSpec:
    kind: str = "teacher_student"
    n_train: int = 4096
    teacher_rank: int = 16
    delta_scale: float = 0.5
    # "random": gap column space drawn uniformly; "weak": drawn from the
    # ``weak_pool`` least-energetic output directions of the student on the
    # task inputs (None means exactly ``teacher_rank`` of them)
    gap_directions: str = "random"
    weak_pool: int | None = None
    input_decay: float = 16.0
    noise: float = 0.0
    n_classes: int = 8
    targets: list[str] | None = None
    seed: int = 0
    extra: dict = field(default_factory=dict)


@dataclass
class Task:
    student: ToyModel
    train: TaskData
    teacher: ToyModel | None
    input_map: np.ndarray

    def calibration_set(self, n: int, source: str, seed: int, batch_size: int = 1) -> CalibrationSet:
        """``downstream`` samples ``n`` training inputs; ``general`` draws from N(0, I)."""
        rng = _rng(seed, 7)
        if source == "downstream":
            idx = rng.choice(self.train.size, size=min(n, self.train.size), replace=False)
            x = self.train.inputs[:, np.sort(idx)]
        elif source == "general":
            x = rng.standard_normal((self.input_map.shape[0], n))
        else:
            raise ValueError(f"unknown calibration source {source!r}")
        return CalibrationSet(x, source, batch_size)


def _weak_directions(student: ToyModel, x: np.ndarray, name: str, pool: int) -> np.ndarray:
    _, cache = forward(student, x)
    y = cache.pre[student.layer_names.index(name)]
    # the full left basis is needed only when there are fewer samples than outputs
    q, _, _ = np.linalg.svd(y, full_matrices=y.shape[0] > y.shape[1])
    return q[:, -pool:]


def teacher_student(model_spec: ModelSpec, task: TaskSpec, seed: int) -> Task:
    if task.gap_directions not in ("random", "weak"):
        raise ValueError(f"unknown gap_directions {task.gap_directions!r}")
    student = pretrained_model(model_spec, seed)
    teacher = student.copy()
    rng = _rng(task.seed, seed, 2)
    basis = input_basis(model_spec.d_in, task.input_decay, _rng(task.seed, seed, 3))
    x = basis @ _rng(task.seed, seed, 4).standard_normal((model_spec.d_in, task.n_train))
    targets = task.targets or teacher.layer_names
    for name in targets:
        w = teacher.weights[name]
        k = min(task.teacher_rank, *w.shape)
        if task.gap_directions == "weak":
            size = k if task.weak_pool is None else max(k, min(task.weak_pool, w.shape[0]))
            pool = _weak_directions(student, x, name, size)
            u = pool @ np.linalg.qr(rng.standard_normal((pool.shape[1], k)))[0]
        else:
            u, _ = np.linalg.qr(rng.standard_normal((w.shape[0], k)))
        v, _ = np.linalg.qr(rng.standard_normal((w.shape[1], k)))
        delta = u @ v.T
        delta *= task.delta_scale * np.linalg.norm(w) / np.linalg.norm(delta)
        teacher.weights[name] = w + delta
    y, _ = forward(teacher, x)
    if task.noise:
        y = y + task.noise * _rng(task.seed, seed, 5).standard_normal(y.shape)
    return Task(student, TaskData(x, y), teacher, basis)


def gaussian_classes(model_spec: ModelSpec, task: TaskSpec, seed: int) -> Task:
    if model_spec.d_out != task.n_classes:
        raise ValueError(f"classification needs d_out == n_classes ({task.n_classes})")
    student = pretrained_model(model_spec, seed)
    rng = _rng(task.seed, seed, 6)
    d = model_spec.d_in
    basis = input_basis(d, task.input_decay, rng)
    means = rng.standard_normal((d, task.n_classes))
    labels = rng.integers(0, task.n_classes, size=task.n_train)
    x = means[:, labels] + basis @ rng.standard_normal((d, task.n_train))
    return Task(student, TaskData(x, labels.astype(np.int64)), None, basis)


def build_task(model_spec: ModelSpec, task: TaskSpec, seed: int) -> Task:
    if task.kind == "teacher_student":
        return teacher_student(model_spec, task, seed)
    if task.kind == "gaussian_classes":
        return gaussian_classes(model_spec, task, seed)
    raise ValueError(f"unknown task kind {task.kind!r}")
