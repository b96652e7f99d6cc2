"""Synthetic task generators and task-file IO.

GP regression tasks over RBF / Matérn / periodic kernels (optionally a mixed
family per batch, or a change-surface blend of two kernels along the stream),
an MLP-based tabular prior, Fourier features and a streaming normaliser.
"""

from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .models import TaskBatch

KERNEL_FAMILIES = ("rbf", "matern12", "matern32", "matern52", "periodic")
LENGTHSCALE_RANGE = (0.25, 1.0)
PERIOD = 2.0
X_RANGE = (-2.0, 2.0)
SIGMA_OBS = 0.1
JITTERS = (1e-6, 1e-5, 1e-4)


class CholeskyError(np.linalg.LinAlgError):
    pass


class TaskFileError(ValueError):
    pass


# --- kernels ----------------------------------------------------------------


@dataclass(frozen=True)
class KernelSpec:
    family: str
    lengthscale: float
    period: float = PERIOD

    def __post_init__(self):
        if self.family not in KERNEL_FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}")
        if self.lengthscale <= 0:
            raise ValueError("lengthscale must be positive")
        if self.period <= 0:
            raise ValueError("period must be positive")

    def of_distance(self, r: np.ndarray) -> np.ndarray:
        r = np.abs(np.asarray(r, dtype=np.float64))
        ell = self.lengthscale
        if self.family == "rbf":
            return np.exp(-(r**2) / (2.0 * ell**2))
        if self.family == "matern12":
            return np.exp(-r / ell)
        if self.family == "matern32":
            s = math.sqrt(3.0) * r / ell
            return (1.0 + s) * np.exp(-s)
        if self.family == "matern52":
            s = math.sqrt(5.0) * r / ell
            return (1.0 + s + 5.0 * r**2 / (3.0 * ell**2)) * np.exp(-s)
        return np.exp(-2.0 * np.sin(np.pi * r / self.period) ** 2 / ell**2)

    def gram(self, x1, x2=None) -> np.ndarray:
        """Kernel matrix between rows of ``x1`` (n, d) and ``x2`` (m, d)."""
        x1 = _as_points(x1)
        x2 = x1 if x2 is None else _as_points(x2)
        diff = x1[:, None, :] - x2[None, :, :]
        r = np.sqrt((diff**2).sum(-1))
        return self.of_distance(r)


def _as_points(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(-1, 1) if x.ndim <= 1 else x


def kernel_eval(spec: KernelSpec, x, x_prime) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    xp = np.atleast_1d(np.asarray(x_prime, dtype=np.float64))
    return float(spec.of_distance(np.sqrt(((x - xp) ** 2).sum())))


def sample_lengthscale(rng: np.random.Generator, lo: float = LENGTHSCALE_RANGE[0], hi: float = LENGTHSCALE_RANGE[1]) -> float:
    return float(10.0 ** rng.uniform(np.log10(lo), np.log10(hi)))


def sample_kernel(family: str, rng: np.random.Generator) -> KernelSpec:
    if family == "mixed":
        return sample_mixed_kernel(rng)
    return KernelSpec(family, sample_lengthscale(rng))


def sample_mixed_kernel(rng: np.random.Generator) -> KernelSpec:
    family = KERNEL_FAMILIES[int(rng.integers(len(KERNEL_FAMILIES)))]
    return KernelSpec(family, sample_lengthscale(rng))


# --- GP sampling --------------------------------------------------------------


def jittered_cholesky(K: np.ndarray) -> np.ndarray:
    n = K.shape[0]
    for jitter in JITTERS:
        try:
            return np.linalg.cholesky(K + jitter * np.eye(n))
        except np.linalg.LinAlgError:
            continue
    raise CholeskyError(f"Cholesky failed with jitter up to {JITTERS[-1]:g}")


def sample_gp_values(K: np.ndarray, sigma_obs: float, rng: np.random.Generator, n_draws: int | None = None) -> np.ndarray:
    """Draw ``f ~ N(0, K)`` and return ``f + sigma_obs * eps``; shape (n,) or (n_draws, n)."""
    L = jittered_cholesky(K)
    n = K.shape[0]
    size = (n,) if n_draws is None else (n_draws, n)
    z = rng.standard_normal(size)
    f = z @ L.T if n_draws is not None else L @ z
    return f + sigma_obs * rng.standard_normal(size)


def _sample_n_context(n_c_range, rng) -> int:
    lo, hi = n_c_range
    if lo < 0 or hi < lo:
        raise ValueError(f"invalid context size range {n_c_range}")
    return int(rng.integers(lo, hi + 1))


def sample_gp_task(
    kernel: str | KernelSpec = "rbf",
    n_c_range: tuple[int, int] = (1, 64),
    n_t: int = 128,
    sigma_obs: float = SIGMA_OBS,
    batch: int = 16,
    rng: np.random.Generator | None = None,
    x_range: tuple[float, float] = X_RANGE,
    d_x: int = 1,
) -> TaskBatch:
    """One training batch: one kernel draw shared by the batch, one N_c for the
    batch, independent inputs and function draws per task."""
    rng = rng or np.random.default_rng()
    spec = kernel if isinstance(kernel, KernelSpec) else sample_kernel(kernel, rng)
    n_c = _sample_n_context(n_c_range, rng)
    n = n_c + n_t
    X = rng.uniform(x_range[0], x_range[1], size=(batch, n, d_x))
    Y = np.empty((batch, n, 1))
    for b in range(batch):
        Y[b, :, 0] = sample_gp_values(spec.gram(X[b]), sigma_obs, rng)
    return TaskBatch(X[:, :n_c], Y[:, :n_c], X[:, n_c:], Y[:, n_c:])


# --- change surface ------------------------------------------------------------


@dataclass(frozen=True)
class ShiftSpec:
    k1: KernelSpec
    k2: KernelSpec
    t0: float
    tau: float
    eps: float = 1e-8

    def __post_init__(self):
        if self.tau < 0:
            raise ValueError("tau must be >= 0")
        if self.eps <= 0:
            raise ValueError("eps must be positive")

    def weight(self, t) -> np.ndarray:
        z = (np.asarray(t, dtype=np.float64) - self.t0) / (self.tau + self.eps)
        return 0.5 * (1.0 + np.tanh(0.5 * z))  # logistic sigmoid, overflow-free

    def gram(self, x, t) -> np.ndarray:
        w = self.weight(t).reshape(-1)
        return np.outer(1 - w, 1 - w) * self.k1.gram(x) + np.outer(w, w) * self.k2.gram(x)


def change_surface_eval(spec: ShiftSpec, xt, xt_prime) -> float:
    (x, t), (xp, tp) = xt, xt_prime
    w, wp = float(spec.weight(t)), float(spec.weight(tp))
    return (1 - w) * (1 - wp) * kernel_eval(spec.k1, x, xp) + w * wp * kernel_eval(spec.k2, x, xp)


def sample_shift_task(
    family: str = "rbf",
    n_c: int = 64,
    n_t: int = 32,
    t0: float = 20.0,
    tau: float = 10.0,
    sigma_obs: float = SIGMA_OBS,
    rng: np.random.Generator | None = None,
) -> tuple[TaskBatch, ShiftSpec]:
    """A stream whose context index ``t`` drives the kernel blend. Targets are
    placed at the final time step, i.e. in the post-shift regime."""
    rng = rng or np.random.default_rng()
    k1 = sample_kernel(family, rng)
    k2 = KernelSpec(k1.family, sample_lengthscale(rng)) if family != "mixed" else sample_mixed_kernel(rng)
    spec = ShiftSpec(k1, k2, t0, tau)
    x = rng.uniform(*X_RANGE, size=(n_c + n_t, 1))
    t = np.concatenate([np.arange(n_c, dtype=np.float64), np.full(n_t, float(n_c))])
    y = sample_gp_values(spec.gram(x, t), sigma_obs, rng)[:, None]
    task = TaskBatch(x[None, :n_c], y[None, :n_c], x[None, n_c:], y[None, n_c:])
    return task, spec


# --- tabular prior ----------------------------------------------------------------


def _elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


ACTIVATIONS = {
    "relu": lambda x: np.maximum(x, 0.0),
    "tanh": np.tanh,
    "sigmoid": lambda x: 0.5 * (1.0 + np.tanh(0.5 * x)),
    "elu": _elu,
    "identity": lambda x: x,
}


@dataclass(frozen=True)
class TabularPriorSpec:
    depth_range: tuple[float, float] = (1.0, 6.0)
    depth_min: int = 2
    width_range: tuple[float, float] = (5.0, 130.0)
    width_min: int = 4
    activations: tuple[str, ...] = tuple(ACTIVATIONS)
    d_x: int = 20
    max_features: int = 20
    noise_std: float = 0.01
    iqr_k: float = 3.0
    max_attempts: int = 5
    max_rejections: int = 100


TARGET_SCALINGS = ("zscore", "minmax", "maxabs", "robust")


def _log_uniform(rng, lo, hi) -> float:
    return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))


def sample_truncated_int(rng, mean_std_range, minimum: int, max_rejections: int = 100) -> int:
    """Round(N(mu, sd)) with mu, sd log-uniform, redrawn until >= minimum."""
    mu = _log_uniform(rng, *mean_std_range)
    sd = _log_uniform(rng, *mean_std_range)
    for _ in range(max_rejections):
        v = int(round(rng.normal(mu, sd)))
        if v >= minimum:
            return v
    return minimum


def iqr_clip(y: np.ndarray, k: float = 3.0) -> np.ndarray:
    q1, q3 = np.percentile(y, [25, 75])
    iqr = q3 - q1
    return np.clip(y, q1 - k * iqr, q3 + k * iqr)


def scale_targets(y: np.ndarray, how: str) -> np.ndarray:
    if how == "zscore":
        return (y - y.mean()) / y.std()
    if how == "minmax":
        return (y - y.min()) / (y.max() - y.min())
    if how == "maxabs":
        return y / np.abs(y).max()
    if how == "robust":
        q1, med, q3 = np.percentile(y, [25, 50, 75])
        return (y - med) / (q3 - q1)
    raise ValueError(f"unknown target scaling {how!r}")


def zscore_columns(X: np.ndarray) -> np.ndarray:
    return (X - X.mean(axis=0)) / X.std(axis=0)


@dataclass
class TabularDataset:
    X: np.ndarray  # (n, d_x) z-scored and zero-padded
    y: np.ndarray  # (n,)
    depth: int
    width: int
    activation: str
    scaling: str
    n_features: int = field(default=0)


def _tabular_attempt(spec: TabularPriorSpec, n: int, rng) -> TabularDataset | None:
    depth = sample_truncated_int(rng, spec.depth_range, spec.depth_min, spec.max_rejections)
    width = sample_truncated_int(rng, spec.width_range, spec.width_min, spec.max_rejections)
    act_name = spec.activations[int(rng.integers(len(spec.activations)))]
    act = ACTIVATIONS[act_name]
    h = rng.standard_normal((n, width))
    units = []
    for _ in range(depth):
        W = rng.standard_normal((width, width)) / np.sqrt(width)
        h = act(h @ W + rng.standard_normal(width) * 0.1) + spec.noise_std * rng.standard_normal((n, width))
        units.append(h)
    pool = np.concatenate(units, axis=1)
    spread = pool.std(axis=0)
    alive = np.flatnonzero(spread > 1e-8 * max(1.0, np.abs(pool).max()))
    if alive.size < 2:
        return None
    # target from the last layer, features from any other live unit
    last = alive[alive >= pool.shape[1] - width]
    if last.size == 0:
        return None
    target_col = int(rng.choice(last))
    rest = alive[alive != target_col]
    n_feat = int(min(rest.size, rng.integers(1, spec.max_features + 1)))
    feat_cols = rng.choice(rest, size=n_feat, replace=False)
    y = iqr_clip(pool[:, target_col], spec.iqr_k)
    if np.ptp(y) <= 1e-12 or y.std() <= 1e-12:
        return None
    scaling = TARGET_SCALINGS[int(rng.integers(len(TARGET_SCALINGS)))]
    y = scale_targets(y, scaling)
    if not np.isfinite(y).all():
        return None
    X = np.zeros((n, spec.d_x))
    X[:, :n_feat] = zscore_columns(pool[:, feat_cols])
    return TabularDataset(X, y, depth, width, act_name, scaling, n_feat)


def sample_tabular_dataset(spec: TabularPriorSpec, n: int, rng: np.random.Generator) -> TabularDataset:
    for _ in range(spec.max_attempts):
        ds = _tabular_attempt(spec, n, rng)
        if ds is not None:
            return ds
    raise RuntimeError(f"tabular prior produced degenerate data {spec.max_attempts} times in a row")


def sample_tabular_task(
    spec: TabularPriorSpec | None = None,
    n_c_range: tuple[int, int] = (10, 1024),
    n_t: int = 128,
    rng: np.random.Generator | None = None,
    batch: int = 1,
) -> TaskBatch:
    spec = spec or TabularPriorSpec()
    rng = rng or np.random.default_rng()
    n_c = _sample_n_context(n_c_range, rng)
    n = n_c + n_t
    X = np.empty((batch, n, spec.d_x))
    Y = np.empty((batch, n, 1))
    for b in range(batch):
        ds = sample_tabular_dataset(spec, n, rng)
        order = rng.permutation(n)
        X[b], Y[b, :, 0] = ds.X[order], ds.y[order]
    return TaskBatch(X[:, :n_c], Y[:, :n_c], X[:, n_c:], Y[:, n_c:])


# --- Fourier features ---------------------------------------------------------------


def fourier_wavelengths(lam_min: float, lam_max: float, D: int) -> np.ndarray:
    if D < 2 or D % 2:
        raise ValueError(f"Fourier embedding width must be a positive even number, got {D}")
    if not 0 < lam_min < lam_max:
        raise ValueError("need 0 < lam_min < lam_max")
    half = D // 2
    if half == 1:
        return np.array([float(lam_min)])
    i = np.arange(half)
    return np.exp(np.log(lam_min) + i * (np.log(lam_max) - np.log(lam_min)) / (half - 1))


def fourier_encode(x, lam_min: float, lam_max: float, D: int) -> np.ndarray:
    """Interleaved ``[cos(2 pi x / L_i), sin(2 pi x / L_i)]`` pairs; shape ``x.shape + (D,)``."""
    lam = fourier_wavelengths(lam_min, lam_max, D)
    phase = 2.0 * np.pi * np.asarray(x, dtype=np.float64)[..., None] / lam
    out = np.empty((*phase.shape[:-1], D))
    out[..., 0::2] = np.cos(phase)
    out[..., 1::2] = np.sin(phase)
    return out


# --- streaming normalisation --------------------------------------------------------


class NotCalibratedError(RuntimeError):
    pass


class OnlineNormalizer:
    """Welford running mean / population variance per feature, with clipping."""

    def __init__(self, dim: int, clip: float = 5.0):
        self.dim = dim
        self.clip = clip
        self.count = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    @staticmethod
    def calibration_size(n_c: int) -> int:
        return max(200, math.ceil(0.2 * n_c))

    def update(self, x) -> None:
        rows = np.asarray(x, dtype=np.float64).reshape(-1, self.dim)
        for row in rows:
            self.count += 1
            delta = row - self.mean
            self.mean = self.mean + delta / self.count
            self.m2 = self.m2 + delta * (row - self.mean)

    def calibrate(self, X) -> None:
        self.update(X)

    @property
    def variance(self) -> np.ndarray:
        return self.m2 / self.count if self.count else np.zeros(self.dim)

    @property
    def std(self) -> np.ndarray:
        var = self.variance
        return np.where(var > 0, np.sqrt(var), 1.0)

    def transform(self, x) -> np.ndarray:
        if self.count == 0:
            raise NotCalibratedError("normaliser used before any calibration data")
        x = np.asarray(x, dtype=np.float64)
        return np.clip((x - self.mean) / self.std, -self.clip, self.clip)


def online_normalize(norm: OnlineNormalizer, x) -> tuple[np.ndarray, OnlineNormalizer]:
    """Normalise ``x`` with the statistics so far, then fold ``x`` into them."""
    out = norm.transform(x)
    norm.update(x)
    return out, norm


# --- task files -----------------------------------------------------------------------

MAGIC = b"NPTK"
VERSION = 1
_HEAD = struct.Struct("<4sIIII")
_TASK = struct.Struct("<II")


def write_tasks(path: str | Path, tasks: Sequence[TaskBatch]) -> None:
    """Little-endian container: header (magic, version, n_tasks, d_x, d_y), then
    per task (N_c, N_t) and float64 X_c | Y_c | X_t | Y_t in row-major order."""
    singles = _split_tasks(tasks)
    d_x, d_y = (singles[0].d_x, singles[0].d_y) if singles else (1, 1)
    buf = io.BytesIO()
    buf.write(_HEAD.pack(MAGIC, VERSION, len(singles), d_x, d_y))
    for t in singles:
        if (t.d_x, t.d_y) != (d_x, d_y):
            raise TaskFileError("all tasks in a file must share d_x and d_y")
        buf.write(_TASK.pack(t.n_context, t.n_target))
        for arr in (t.X_c, t.Y_c, t.X_t, t.Y_t):
            buf.write(np.ascontiguousarray(arr[0], dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def _split_tasks(tasks: Sequence[TaskBatch]) -> list[TaskBatch]:
    out = []
    for t in tasks:
        out.extend(t.item(i) for i in range(t.batch))
    return out


def read_tasks(path: str | Path) -> list[TaskBatch]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        return read_tasks_csv(path)
    if len(raw) < _HEAD.size:
        raise TaskFileError("task file truncated in header")
    _, version, n_tasks, d_x, d_y = _HEAD.unpack_from(raw, 0)
    if version != VERSION:
        raise TaskFileError(f"unsupported task file version {version}")
    off = _HEAD.size
    tasks = []
    for _ in range(n_tasks):
        if off + _TASK.size > len(raw):
            raise TaskFileError("task file truncated")
        n_c, n_t = _TASK.unpack_from(raw, off)
        off += _TASK.size
        arrays = []
        for n, d in ((n_c, d_x), (n_c, d_y), (n_t, d_x), (n_t, d_y)):
            nbytes = 8 * n * d
            if off + nbytes > len(raw):
                raise TaskFileError("task file truncated")
            arrays.append(np.frombuffer(raw, dtype="<f8", count=n * d, offset=off).reshape(1, n, d).astype(np.float64))
            off += nbytes
        tasks.append(TaskBatch(*arrays))
    if off != len(raw):
        raise TaskFileError("trailing bytes after last task")
    return tasks


def write_tasks_csv(path: str | Path, tasks: Sequence[TaskBatch]) -> None:
    """One row per point: task, role (c or t), index, x_0.., y_0.."""
    singles = _split_tasks(tasks)
    d_x, d_y = (singles[0].d_x, singles[0].d_y) if singles else (1, 1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task", "role", "index"] + [f"x{i}" for i in range(d_x)] + [f"y{i}" for i in range(d_y)])
        for k, t in enumerate(singles):
            for role, X, Y in (("c", t.X_c[0], t.Y_c[0]), ("t", t.X_t[0], t.Y_t[0])):
                for i in range(X.shape[0]):
                    w.writerow([k, role, i] + [repr(float(v)) for v in X[i]] + [repr(float(v)) for v in Y[i]])


def read_tasks_csv(path: str | Path) -> list[TaskBatch]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:3] != ["task", "role", "index"]:
        raise TaskFileError(f"{path}: not a task file (bad magic / header)")
    head = rows[0]
    d_x = sum(1 for h in head if h.startswith("x"))
    d_y = sum(1 for h in head if h.startswith("y"))
    grouped: dict[int, dict[str, list]] = {}
    for r in rows[1:]:
        k, role = int(r[0]), r[1]
        vals = [float(v) for v in r[3:]]
        grouped.setdefault(k, {"c": [], "t": []})[role].append(vals)
    tasks = []
    for k in sorted(grouped):
        c = np.array(grouped[k]["c"], dtype=np.float64).reshape(-1, d_x + d_y)
        t = np.array(grouped[k]["t"], dtype=np.float64).reshape(-1, d_x + d_y)
        tasks.append(TaskBatch(c[None, :, :d_x], c[None, :, d_x:], t[None, :, :d_x], t[None, :, d_x:]))
    return tasks
