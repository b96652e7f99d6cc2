"""Log-likelihood metrics and the KL-gap measure of (non-)exchangeability.

A prediction rule maps an ordered history (after a fixed conditioning set) and
the next input to a distribution over the next output. Its joint under one
ordering is the product of its one-step conditionals; averaging that joint
over orderings gives an exchangeable rule, and the KL divergence between the
two is the gap reported here.
"""

from __future__ import annotations

import itertools
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from .models import NeuralProcess, TaskBatch, gaussian_logpdf
from .streaming import StreamSession

MAX_ENUMERATE = 720  # 6!


# --- prediction rules ----------------------------------------------------------


class PredictionRule:
    """Sequential predictive over scalar outputs.

    ``x_hist``/``y_hist`` always start with the fixed conditioning set.
    """

    def logpdf_next(self, x_hist: np.ndarray, y_hist: np.ndarray, x_next, y_next: float) -> float:
        raise NotImplementedError

    def sample_next(self, x_hist: np.ndarray, y_hist: np.ndarray, x_next, rng: np.random.Generator) -> float:
        raise NotImplementedError

    def joint_logpdf(self, x: np.ndarray, y: np.ndarray, fixed: tuple[np.ndarray, np.ndarray]) -> float:
        xf, yf = fixed
        total = 0.0
        for i in range(len(y)):
            xh = np.concatenate([xf, x[:i]])
            yh = np.concatenate([yf, y[:i]])
            total += self.logpdf_next(xh, yh, x[i], y[i])
        return total

    def sample_sequence(self, x: np.ndarray, fixed: tuple[np.ndarray, np.ndarray], rng: np.random.Generator) -> np.ndarray:
        xf, yf = fixed
        y = np.empty(len(x))
        for i in range(len(x)):
            y[i] = self.sample_next(np.concatenate([xf, x[:i]]), np.concatenate([yf, y[:i]]), x[i], rng)
        return y


class GaussianRule(PredictionRule):
    def predict(self, x_hist: np.ndarray, y_hist: np.ndarray, x_next) -> tuple[float, float]:
        raise NotImplementedError

    def logpdf_next(self, x_hist, y_hist, x_next, y_next) -> float:
        mean, var = self.predict(x_hist, y_hist, x_next)
        return float(gaussian_logpdf(y_next, mean, var))

    def sample_next(self, x_hist, y_hist, x_next, rng) -> float:
        mean, var = self.predict(x_hist, y_hist, x_next)
        return float(mean + math.sqrt(var) * rng.standard_normal())


class IIDGaussianRule(GaussianRule):
    """Ignores the history: every output is N(mean, std^2). Exchangeable."""

    def __init__(self, mean: float = 0.0, std: float = 1.0):
        self.mean, self.std = mean, std

    def predict(self, x_hist, y_hist, x_next):
        return self.mean, self.std**2


class LastValueRule(GaussianRule):
    """N(y_last, std^2): depends on order, so it is not exchangeable."""

    def __init__(self, std: float = 1.0, first_mean: float = 0.0):
        self.std, self.first_mean = std, first_mean

    def predict(self, x_hist, y_hist, x_next):
        mean = float(y_hist[-1]) if len(y_hist) else self.first_mean
        return mean, self.std**2


class NPRule(GaussianRule):
    """Prediction rule backed by a neural process streaming session."""

    def __init__(self, model: NeuralProcess):
        self.model = model

    def _session(self, x_hist, y_hist) -> StreamSession:
        s = StreamSession(self.model)
        if len(y_hist):
            s.observe(np.reshape(x_hist, (1, len(y_hist), -1)), np.reshape(y_hist, (1, -1, 1)))
        return s

    def predict(self, x_hist, y_hist, x_next):
        mean, var = self._session(x_hist, y_hist).predict(np.reshape(x_next, (1, 1, -1))).arrays()
        return float(mean.reshape(-1)[0]), float(var.reshape(-1)[0])

    def joint_logpdf(self, x, y, fixed) -> float:
        s = self._session(*fixed)
        return s.predict_ar_teacher_forced(np.reshape(x, (1, len(y), -1)), np.reshape(y, (1, -1, 1)))

    def sample_sequence(self, x, fixed, rng) -> np.ndarray:
        s = self._session(*fixed)
        mix = s.predict_ar_sampled(np.reshape(x, (1, len(x), -1)), 1, rng)
        return mix.samples[0, 0, :, 0]


class DiscreteRule(PredictionRule):
    """Binary outputs with P(y_next = 1 | ordered history) given by a function."""

    def __init__(self, prob_one: Callable[[tuple[int, ...]], float]):
        self.prob_one = prob_one

    def logpdf_next(self, x_hist, y_hist, x_next, y_next) -> float:
        p = self.prob_one(tuple(int(v) for v in y_hist))
        return math.log(p if int(y_next) == 1 else 1.0 - p)

    def sample_next(self, x_hist, y_hist, x_next, rng) -> float:
        return float(rng.random() < self.prob_one(tuple(int(v) for v in y_hist)))


# --- joint and exchangeable log-densities ------------------------------------------


def _empty_fixed(x: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    return np.zeros((0, *x.shape[1:])), np.zeros(0)


def _norm_inputs(x, y, fixed):
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(len(y), -1) if x.size != len(y) else x.reshape(-1, 1)
    if fixed is None:
        fixed = _empty_fixed(x)
    xf = np.asarray(fixed[0], dtype=np.float64).reshape(-1, x.shape[1])
    yf = np.asarray(fixed[1], dtype=np.float64).reshape(-1)
    return x, y, (xf, yf)


def joint_ar_logpdf(rule: PredictionRule, x, y, fixed=None) -> float:
    """sum_i log q(y_i | y_fixed, y_{1:i-1}) under the given ordering."""
    x, y, fixed = _norm_inputs(x, y, fixed)
    if len(y) < 1:
        raise ValueError("need at least one point")
    return float(rule.joint_logpdf(x, y, fixed))


def permutation_set(n: int, k: int, rng: np.random.Generator | None = None) -> list[tuple[int, ...]]:
    """All n! orderings when n! <= 720, otherwise ``k`` distinct random ones."""
    if math.factorial(n) <= MAX_ENUMERATE:
        return list(itertools.permutations(range(n)))
    rng = rng or np.random.default_rng()
    seen: dict[tuple[int, ...], None] = {}
    while len(seen) < k:
        seen.setdefault(tuple(int(i) for i in rng.permutation(n)), None)
    return list(seen)


def exchangeable_logpdf(
    rule: PredictionRule,
    x,
    y,
    fixed=None,
    perms: Sequence[Sequence[int]] | None = None,
    k: int = 256,
    rng: np.random.Generator | None = None,
) -> float:
    """log of the permutation-averaged joint, (1/K) sum_pi q(y_pi | x_pi)."""
    x, y, fixed = _norm_inputs(x, y, fixed)
    if perms is None:
        perms = permutation_set(len(y), k, rng)
    if len(perms) < 1:
        raise ValueError("need at least one permutation")
    logs = np.array([rule.joint_logpdf(x[list(p)], y[list(p)], fixed) for p in perms])
    out = float(logsumexp(logs) - math.log(len(logs)))
    if not math.isfinite(out):
        raise FloatingPointError("log-mean-exp overflowed")
    return out


# --- KL gap --------------------------------------------------------------------------


@dataclass
class KLGapEstimate:
    gap: float
    se: float
    n_perm_inner: int
    n_perm_outer: int
    n_mc: int
    n_datasets: int
    per_dataset: list[tuple[float, float]] = field(default_factory=list)

    def consistent_with_zero(self, k: float = 3.0, atol: float = 1e-12) -> bool:
        return abs(self.gap) <= k * self.se + atol


@dataclass
class GapDataset:
    """Fixed conditioning set plus the inputs whose outputs the rule generates."""

    x: np.ndarray  # (n, d_x)
    fixed_x: np.ndarray
    fixed_y: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        self.x = x.reshape(-1, 1) if x.ndim == 1 else x
        self.fixed_x = np.asarray(self.fixed_x, dtype=np.float64).reshape(-1, self.x.shape[1])
        self.fixed_y = np.asarray(self.fixed_y, dtype=np.float64).reshape(-1)


def _mean_se(values: np.ndarray) -> tuple[float, float]:
    if values.size < 2:
        return float(values.mean()), 0.0
    return float(values.mean()), float(values.std(ddof=1) / math.sqrt(values.size))


def worker_count(requested: int | None = None) -> int:
    env = os.environ.get("NPSTREAM_THREADS")
    cap = int(env) if env and env.isdigit() and int(env) > 0 else (os.cpu_count() or 1)
    return max(1, min(cap, requested or cap))


def _dataset_gap_terms(rule, ds: GapDataset, n_perm_inner, n_perm_outer, n_mc, seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    n = ds.x.shape[0]
    fixed = (ds.fixed_x, ds.fixed_y)
    inner = permutation_set(n, n_perm_inner, rng)
    outer = permutation_set(n, n_perm_outer, rng)
    if len(outer) > n_perm_outer:
        pick = rng.choice(len(outer), size=n_perm_outer, replace=False)
        outer = [outer[i] for i in sorted(pick)]
    terms = []
    for perm in outer:
        xo = ds.x[list(perm)]
        for _ in range(n_mc):
            ys = rule.sample_sequence(xo, fixed, rng)
            log_q = rule.joint_logpdf(xo, ys, fixed)
            log_qhat = exchangeable_logpdf(rule, xo, ys, fixed, perms=inner)
            terms.append(log_q - log_qhat)
    return np.array(terms)


def kl_gap(
    rule: PredictionRule,
    datasets: Sequence[GapDataset] | Callable[[np.random.Generator], GapDataset],
    n_datasets: int | None = None,
    n_perm_inner: int = 256,
    n_perm_outer: int = 128,
    n_mc: int = 32,
    rng: np.random.Generator | None = None,
    workers: int | None = 1,
) -> KLGapEstimate:
    """Monte Carlo estimate of E_pi D_KL(q_pi || q_hat).

    For each dataset and each outer ordering pi, outputs are drawn from the
    rule by sampled unrolling in that order, and log q_pi - log q_hat is
    averaged. ``q_hat`` averages over ``n_perm_inner`` orderings (all of them
    when there are at most 720). The standard error is over all terms.
    """
    if min(n_perm_inner, n_perm_outer, n_mc) < 1:
        raise ValueError("permutation and sample counts must be >= 1")
    rng = rng or np.random.default_rng()
    if callable(datasets):
        if n_datasets is None or n_datasets < 1:
            raise ValueError("n_datasets is required with a dataset sampler")
        datasets = [datasets(rng) for _ in range(n_datasets)]
    datasets = list(datasets)
    seeds = rng.integers(0, 2**63 - 1, size=len(datasets))
    job = lambda i: _dataset_gap_terms(rule, datasets[i], n_perm_inner, n_perm_outer, n_mc, int(seeds[i]))
    n_workers = worker_count(workers)
    if n_workers > 1:
        with ThreadPoolExecutor(n_workers) as pool:
            per = list(pool.map(job, range(len(datasets))))
    else:
        per = [job(i) for i in range(len(datasets))]
    allterms = np.concatenate(per)
    gap, se = _mean_se(allterms)
    n = datasets[0].x.shape[0] if datasets else 0
    n_inner = math.factorial(n) if math.factorial(n) <= MAX_ENUMERATE else n_perm_inner
    return KLGapEstimate(
        gap,
        se,
        n_inner,
        min(n_perm_outer, math.factorial(n)),
        n_mc,
        len(datasets),
        [_mean_se(t) for t in per],
    )


# --- discrete surrogate: exact decomposition --------------------------------------------


def enumerate_joint(rule: DiscreteRule, n: int) -> dict[tuple[int, ...], float]:
    """Exact probabilities of every binary sequence of length ``n`` under ``rule``."""
    x = np.zeros((n, 1))
    fixed = (np.zeros((0, 1)), np.zeros(0))
    return {ys: math.exp(rule.joint_logpdf(x, np.array(ys, dtype=float), fixed)) for ys in itertools.product((0, 1), repeat=n)}


def symmetrise(q: dict[tuple[int, ...], float]) -> dict[tuple[int, ...], float]:
    n = len(next(iter(q)))
    perms = list(itertools.permutations(range(n)))
    return {ys: sum(q[tuple(ys[i] for i in p)] for p in perms) / len(perms) for ys in q}


def bernoulli_mixture(weights: Sequence[float], thetas: Sequence[float], n: int) -> dict[tuple[int, ...], float]:
    """Exchangeable joint: a mixture of iid Bernoulli sequences."""
    out = {}
    for ys in itertools.product((0, 1), repeat=n):
        k = sum(ys)
        out[ys] = float(sum(w * t**k * (1 - t) ** (n - k) for w, t in zip(weights, thetas)))
    return out


def kl_discrete(a: dict, b: dict) -> float:
    return float(math.fsum(pa * math.log(pa / b[k]) for k, pa in a.items() if pa > 0))


def decomposition_residual(q: dict, p: dict) -> tuple[float, float, float, float]:
    """(KL(q||p), KL(q||q_hat), KL(q_hat||p), residual) for the exact decomposition."""
    qhat = symmetrise(q)
    lhs = kl_discrete(q, p)
    gap = kl_discrete(q, qhat)
    rest = kl_discrete(qhat, p)
    return lhs, gap, rest, lhs - gap - rest


# --- log-likelihood reports ---------------------------------------------------------------


@dataclass
class LLReport:
    per_task: np.ndarray
    mean: float
    sem: float


def task_mean_ll(model: NeuralProcess, task: TaskBatch) -> np.ndarray:
    """Mean per-point log-likelihood of each task in the batch."""
    mean, var = model.predict(task).arrays()
    return gaussian_logpdf(task.Y_t, mean, var).mean(axis=(1, 2))


def ll_report(model: NeuralProcess, tasks: Sequence[TaskBatch]) -> LLReport:
    per = np.concatenate([task_mean_ll(model, t) for t in tasks])
    sem = float(per.std(ddof=1) / math.sqrt(per.size)) if per.size > 1 else 0.0
    return LLReport(per, float(per.mean()), sem)


def constant_baseline_ll(y: np.ndarray) -> float:
    """Expected LL of predicting N(mean, var) of ``y`` itself: -0.5 log(2 pi var) - 0.5."""
    var = float(np.var(y))
    return -0.5 * math.log(2.0 * math.pi * var) - 0.5
