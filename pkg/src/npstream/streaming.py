"""Streaming sessions: observe points one (or a few) at a time, query
factorised or autoregressive predictions, and keep exact attention-op
accounting per step."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .models import (
    BufferState,
    CachedState,
    ContextState,
    EmptyContextError,
    GaussianPrediction,
    NeuralProcess,
    gaussian_logpdf,
)
from .nn import OpCounter


@dataclass
class LedgerRow:
    step: int
    n_s: int
    cond_ops: int = 0
    query_ops: int = 0
    wall_ms: float = 0.0
    reencodes: int = 0


@dataclass
class CostLedger:
    """One row per observe() call; query work is charged to the latest row.

    Counts come straight from the attention calls (score entries, one per
    query/key pair per head per batch item), so they are exact.
    """

    rows: list[LedgerRow] = field(default_factory=list)

    def open_row(self, n_s: int) -> LedgerRow:
        row = LedgerRow(len(self.rows), n_s)
        self.rows.append(row)
        return row

    @property
    def current(self) -> LedgerRow:
        if not self.rows:
            return self.open_row(0)
        return self.rows[-1]

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows])

    @property
    def total_cond_ops(self) -> int:
        return int(sum(r.cond_ops for r in self.rows))

    @property
    def total_query_ops(self) -> int:
        return int(sum(r.query_ops for r in self.rows))

    @property
    def total_reencodes(self) -> int:
        return int(sum(r.reencodes for r in self.rows))


@dataclass
class ARMixture:
    """Per-target equal-weight Gaussian mixture from ``S`` sampled unrolls."""

    means: np.ndarray  # (S, B, N_t, d_y)
    variances: np.ndarray
    samples: np.ndarray

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    def mean(self) -> np.ndarray:
        return self.means.mean(axis=0)

    def variance(self) -> np.ndarray:
        mu = self.mean()
        return (self.variances + self.means**2).mean(axis=0) - mu**2

    def logpdf(self, y) -> np.ndarray:
        """Per-target log-density of the mixture marginal."""
        comp = gaussian_logpdf(np.asarray(y)[None], self.means, self.variances)
        top = comp.max(axis=0)
        return top + np.log(np.exp(comp - top).mean(axis=0))


class StreamSession:
    """One stream of context points conditioning one model.

    Incremental families extend their KV cache on each observe(); TNP-D and
    LBANP only buffer the point and rebuild the context encoding the next time
    a prediction is requested, charging that work to conditioning.
    """

    def __init__(self, model: NeuralProcess, state: ContextState | None = None):
        self.model = model
        self.state = state
        self.ledger = CostLedger()

    @property
    def n_s(self) -> int:
        return 0 if self.state is None else self.state.n

    @property
    def d_x(self) -> int:
        return self.model.cfg.d_x

    def observe(self, x, y) -> StreamSession:
        counter = OpCounter()
        tic = time.perf_counter()
        if self.state is None:
            self.state = self.model.condition(x, y, counter)
        else:
            self.model.extend(self.state, x, y, counter)
        row = self.ledger.open_row(self.n_s)
        row.cond_ops += counter.score_ops
        row.wall_ms += 1e3 * (time.perf_counter() - tic)
        return self

    def observe_many(self, X, Y) -> StreamSession:
        """Observe rows of ``X``/``Y`` one at a time."""
        X = np.asarray(X, dtype=np.float64).reshape(-1, self.model.cfg.d_x)
        Y = np.asarray(Y, dtype=np.float64).reshape(-1, self.model.cfg.d_y)
        for i in range(X.shape[0]):
            self.observe(X[i : i + 1], Y[i : i + 1])
        return self

    def refresh(self) -> None:
        """Bring a buffered context encoding up to date (no-op for cached families)."""
        if isinstance(self.state, BufferState) and self.state.encoded is None:
            c = OpCounter()
            tic = time.perf_counter()
            self.model.query(self.state, np.zeros((self.state.X.shape[0], 1, self.d_x)), None, c)
            row = self.ledger.current
            row.cond_ops += c.score_ops
            row.reencodes += 1
            row.wall_ms += 1e3 * (time.perf_counter() - tic)

    def predict(self, X_t) -> GaussianPrediction:
        """Factorised predictions at ``X_t`` given everything observed."""
        if self.state is None:
            raise EmptyContextError("session has not observed any points")
        q, c = OpCounter(), OpCounter()
        before = self.state.reencodes
        tic = time.perf_counter()
        pred = self.model.query(self.state, X_t, q, c)
        row = self.ledger.current
        row.query_ops += q.score_ops
        row.cond_ops += c.score_ops
        row.reencodes += self.state.reencodes - before
        row.wall_ms += 1e3 * (time.perf_counter() - tic)
        return pred

    def fork(self) -> StreamSession:
        """Independent copy; the fork's ledger starts empty."""
        return StreamSession(self.model, None if self.state is None else self.state.fork())

    def _charge_fork(self, other: StreamSession) -> None:
        row = self.ledger.current
        row.query_ops += other.ledger.total_query_ops + other.ledger.total_cond_ops

    def predict_ar_teacher_forced(self, X_t, Y_t) -> float:
        """Joint log-likelihood sum_n log p(y_n | x_n, context, (x_j, y_j)_{j<n}).

        Runs on a fork, so this session is unchanged; the fork's work is
        charged to this session's query ops.
        """
        X_t, Y_t = self._targets(X_t, Y_t)
        fork = self.fork()
        total = 0.0
        for n in range(X_t.shape[1]):
            x, y = X_t[:, n : n + 1], Y_t[:, n : n + 1]
            mean, var = fork.predict(x).arrays()
            total += float(gaussian_logpdf(y, mean, var).sum())
            if n + 1 < X_t.shape[1]:
                fork.observe(x, y)
        self._charge_fork(fork)
        return total

    def predict_ar_sampled(self, X_t, S: int, rng: np.random.Generator) -> ARMixture:
        """``S`` independent unrolls; each samples y_n from its prediction and
        appends it before predicting the next target."""
        if S < 1:
            raise ValueError("need at least one unroll")
        X_t = self._targets(X_t)
        n_t = X_t.shape[1]
        d_y = self.model.cfg.d_y
        b = X_t.shape[0]
        means = np.empty((S, b, n_t, d_y))
        variances = np.empty_like(means)
        samples = np.empty_like(means)
        for s in range(S):
            fork = self.fork()
            for n in range(n_t):
                x = X_t[:, n : n + 1]
                mean, var = fork.predict(x).arrays()
                y = mean + np.sqrt(var) * rng.standard_normal(mean.shape)
                means[s, :, n], variances[s, :, n], samples[s, :, n] = mean[:, 0], var[:, 0], y[:, 0]
                if n + 1 < n_t:
                    fork.observe(x, y)
            self._charge_fork(fork)
        return ARMixture(means, variances, samples)

    def _targets(self, X_t, Y_t=None):
        X_t = np.asarray(X_t, dtype=np.float64)
        if X_t.ndim == 1:
            X_t = X_t.reshape(1, -1, self.d_x) if self.d_x > 1 else X_t.reshape(1, -1, 1)
        elif X_t.ndim == 2:
            X_t = X_t[None]
        if Y_t is None:
            return X_t
        Y_t = np.asarray(Y_t, dtype=np.float64).reshape(X_t.shape[0], X_t.shape[1], -1)
        return X_t, Y_t


def open_session(model: NeuralProcess, X_c=None, Y_c=None) -> StreamSession:
    """A session conditioned on an initial context in one shot."""
    s = StreamSession(model)
    if X_c is not None and np.size(X_c):
        s.observe(X_c, Y_c)
    return s


def is_incremental(session: StreamSession) -> bool:
    return isinstance(session.state, CachedState)

