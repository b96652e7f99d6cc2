"""Meta-training: Gaussian NLL objectives, AdamW with global-norm clipping and
a warmup + half-cosine learning-rate schedule."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import tensor as T
from .models import CAUSAL_FAMILIES, GaussianPrediction, ModelConfig, NeuralProcess, TaskBatch, TransformerNP
from .tasks import TabularPriorSpec, sample_gp_task, sample_tabular_task


class NumericalError(FloatingPointError):
    """Training produced a non-finite loss or gradient."""


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 1
    samples_per_epoch: int = 16000
    batch: int = 16
    steps: int = 0  # overrides epochs * samples_per_epoch / batch when > 0
    lr: float = 5e-4
    schedule: str = "cosine"
    warmup_frac: float = 0.10
    lr_min: float = 1e-6
    clip_norm: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    seed: int = 0
    # data
    task: str = "gp"
    kernel: str = "rbf"
    n_c_min: int = 1
    n_c_max: int = 64
    n_t: int = 128
    sigma_obs: float = 0.1
    # "auto" uses the dense prefix objective for inctnp_seq and the standard one otherwise
    objective: str = "auto"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"schedule must be constant or cosine, got {self.schedule!r}")
        if self.task not in ("gp", "tabular"):
            raise ConfigError(f"task must be gp or tabular, got {self.task!r}")
        if self.objective not in ("auto", "standard", "dense"):
            raise ConfigError(f"objective must be auto, standard or dense, got {self.objective!r}")
        if self.batch < 1 or self.epochs < 0 or self.samples_per_epoch < 0 or self.steps < 0:
            raise ConfigError("batch must be >= 1 and epochs/samples/steps >= 0")
        if self.lr < 0 or self.lr_min < 0 or self.clip_norm <= 0:
            raise ConfigError("learning rates must be >= 0 and clip_norm > 0")
        if not 0 <= self.warmup_frac < 1:
            raise ConfigError("warmup_frac must lie in [0, 1)")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0:
            raise ConfigError("betas must lie in [0, 1) and eps > 0")
        if not 0 <= self.n_c_min <= self.n_c_max or self.n_t < 1:
            raise ConfigError("need 0 <= n_c_min <= n_c_max and n_t >= 1")

    @property
    def steps_per_epoch(self) -> int:
        return max(1, self.samples_per_epoch // self.batch)

    @property
    def total_steps(self) -> int:
        return self.steps if self.steps > 0 else self.epochs * self.steps_per_epoch


# --- config files --------------------------------------------------------------

_TRAIN_KEYS = {f.name: f.type for f in fields(TrainConfig)}
_MODEL_KEYS = {f.name: f.type for f in fields(ModelConfig)}


def _convert(kind: str, raw: str, key: str):
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from exc
    return raw


def parse_config_text(text: str) -> tuple[TrainConfig, ModelConfig]:
    """Flat ``key = value`` lines; ``#`` starts a comment. Keys are the fields
    of :class:`TrainConfig` and :class:`ModelConfig`."""
    train, model = {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in _TRAIN_KEYS:
            train[key] = _convert(_TRAIN_KEYS[key], raw, key)
        elif key in _MODEL_KEYS:
            model[key] = _convert(_MODEL_KEYS[key], raw, key)
        else:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
    try:
        return TrainConfig(**train), ModelConfig(**model)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path) -> tuple[TrainConfig, ModelConfig]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text())


def dump_config(train: TrainConfig, model: ModelConfig) -> str:
    lines = [f"{k} = {v}" for k, v in asdict(model).items()]
    lines += [f"{k} = {v}" for k, v in asdict(train).items()]
    return "\n".join(lines) + "\n"


# --- objectives -------------------------------------------------------------------


def nll_loss(pred: GaussianPrediction, Y_t) -> T.Tensor:
    """Mean negative Gaussian log-density over batch, targets and output dims."""
    if pred.mean.shape != np.shape(Y_t):
        raise T.ShapeError(f"prediction shape {pred.mean.shape} does not match targets {np.shape(Y_t)}")
    if not (pred.variance.data > 0).all():
        raise NumericalError("non-positive predictive variance")
    return T.neg(T.mean(pred.log_prob(np.asarray(Y_t, dtype=pred.mean.dtype))))


def dense_seq_loss(model: TransformerNP, p, X, Y) -> T.Tensor:
    """Mean NLL of positions 2..N, each predicted from the points before it."""
    pred = model.seq_forward(p, X, Y)
    return nll_loss(pred, np.asarray(Y)[..., 1:, :])


def uses_dense_objective(model: NeuralProcess, cfg: TrainConfig) -> bool:
    if cfg.objective == "auto":
        return model.cfg.family == "inctnp_seq"
    if cfg.objective == "dense" and model.cfg.family not in CAUSAL_FAMILIES:
        raise ConfigError("the dense prefix objective needs a causal family")
    return cfg.objective == "dense"


def task_loss(model: NeuralProcess, p, task: TaskBatch, dense: bool) -> T.Tensor:
    if dense:
        X = np.concatenate([task.X_c, task.X_t], axis=1)
        Y = np.concatenate([task.Y_c, task.Y_t], axis=1)
        return dense_seq_loss(model, p, X, Y)
    return nll_loss(model.forward(p, task.X_c, task.Y_c, task.X_t), task.Y_t)


# --- optimiser -----------------------------------------------------------------------


@dataclass
class OptState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> OptState:
        return cls({k: np.zeros_like(a) for k, a in params.items()}, {k: np.zeros_like(a) for k, a in params.items()})


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))


def adamw_step(
    params: dict[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: OptState,
    lr: float,
    cfg: TrainConfig,
) -> float:
    """Clip gradients to global norm ``cfg.clip_norm``, then apply a
    bias-corrected Adam update with decoupled weight decay, in place.
    Returns the pre-clip global norm."""
    norm = global_norm(grads)
    scale = cfg.clip_norm / norm if norm > cfg.clip_norm else 1.0
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    for k, theta in params.items():
        g = grads[k] * scale
        m = state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        v = state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        params[k] = (theta - lr * update - lr * cfg.weight_decay * theta).astype(theta.dtype, copy=False)
    return norm


def warmup_steps(total: int, cfg: TrainConfig) -> int:
    return math.ceil(cfg.warmup_frac * total)


def lr_at_step(t: int, total: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to ``lr`` over the first ceil(warmup_frac * total)
    steps, then a half-cosine from ``lr`` to ``lr_min`` at step ``total - 1``.
    The floor never exceeds the peak, so ``lr = 0`` freezes the weights."""
    if not 0 <= t < total:
        raise ValueError(f"step {t} outside [0, {total})")
    if cfg.schedule == "constant":
        return cfg.lr
    w = warmup_steps(total, cfg)
    if t < w:
        return cfg.lr * t / w
    span = total - 1 - w
    progress = 1.0 if span <= 0 else (t - w) / span
    floor = min(cfg.lr_min, cfg.lr)
    return floor + 0.5 * (cfg.lr - floor) * (1.0 + math.cos(math.pi * progress))


# --- loop ------------------------------------------------------------------------------


def make_task_source(cfg: TrainConfig, d_x: int = 1) -> Callable[[np.random.Generator], TaskBatch]:
    if cfg.task == "tabular":
        spec = TabularPriorSpec(d_x=d_x, max_features=d_x)
        return lambda rng: sample_tabular_task(spec, (cfg.n_c_min, cfg.n_c_max), cfg.n_t, rng, cfg.batch)
    return lambda rng: sample_gp_task(cfg.kernel, (cfg.n_c_min, cfg.n_c_max), cfg.n_t, cfg.sigma_obs, cfg.batch, rng, d_x=d_x)


@dataclass
class StepRecord:
    step: int
    lr: float
    train_loss: float
    grad_norm: float


@dataclass
class TrainResult:
    records: list[StepRecord] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.train_loss for r in self.records])


def train_step(model: NeuralProcess, task: TaskBatch, state: OptState, lr: float, cfg: TrainConfig, dense: bool, task_seed: int) -> tuple[float, float]:
    tape = T.GradTape()
    p = tape.watch_all(model.params)
    try:
        loss = task_loss(model, p, task, dense)
    except T.NonFiniteError as exc:
        raise NumericalError(f"non-finite forward pass on task seed {task_seed}: {exc}") from exc
    value = loss.item()
    if not math.isfinite(value):
        raise NumericalError(f"non-finite loss on task seed {task_seed}")
    tape.backward(loss)
    grads = {k: p[k].grad for k in model.params}
    norm = adamw_step(model.params, grads, state, lr, cfg)
    if not math.isfinite(norm):
        raise NumericalError(f"non-finite gradient norm on task seed {task_seed}")
    return value, norm


def train_epoch(
    model: NeuralProcess,
    source: Callable[[np.random.Generator], TaskBatch],
    cfg: TrainConfig,
    state: OptState,
    start: int,
    n_steps: int,
    total: int,
) -> list[StepRecord]:
    """Run ``n_steps`` optimiser steps starting at global step ``start``.

    Task ``t`` is drawn from its own generator seeded by ``(seed, t)``, so a
    failing task can be regenerated from the seed named in the error.
    """
    dense = uses_dense_objective(model, cfg)
    out = []
    for t in range(start, start + n_steps):
        task_seed = int(np.random.SeedSequence([cfg.seed, t]).generate_state(1)[0])
        task = source(np.random.default_rng(task_seed))
        lr = lr_at_step(t, total, cfg)
        loss, norm = train_step(model, task, state, lr, cfg, dense, task_seed)
        out.append(StepRecord(t, lr, loss, norm))
    return out


def train(
    model: NeuralProcess,
    cfg: TrainConfig,
    source: Callable[[np.random.Generator], TaskBatch] | None = None,
    state: OptState | None = None,
    metrics_path: str | Path | None = None,
    on_epoch: Callable[[int, list[StepRecord]], None] | None = None,
) -> TrainResult:
    source = source or make_task_source(cfg, model.cfg.d_x)
    state = state or OptState.zeros_like(model.params)
    total = cfg.total_steps
    per_epoch = cfg.steps_per_epoch if cfg.steps == 0 else total
    result = TrainResult()
    tic = time.perf_counter()
    start, epoch = 0, 0
    while start < total:
        n = min(per_epoch, total - start)
        recs = train_epoch(model, source, cfg, state, start, n, total)
        result.records.extend(recs)
        if on_epoch is not None:
            on_epoch(epoch, recs)
        start += n
        epoch += 1
    result.seconds = time.perf_counter() - tic
    if metrics_path is not None:
        write_metrics(metrics_path, result.records)
    return result


def write_metrics(path: str | Path, records: list[StepRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "lr", "train_loss", "grad_norm"])
        for r in records:
            w.writerow([r.step, repr(float(r.lr)), repr(float(r.train_loss)), repr(float(r.grad_norm))])
