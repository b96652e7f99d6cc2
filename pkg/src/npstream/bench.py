"""Scaling benchmark: exact attention-op counts per streamed step, their
cumulative sums, and log-log slope fits. Wall-clock is reported only."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from .models import ModelConfig, build_model, conditioning_ops, query_ops
from .streaming import StreamSession


class BenchError(ValueError):
    pass


@dataclass
class BenchRow:
    family: str
    n_s: int
    cond_ops: int
    query_ops: int
    cum_cond_ops: int
    wall_us: float


@dataclass
class SlopeFit:
    slope: float
    lo: float
    hi: float
    r2: float


@dataclass
class BenchResult:
    rows: list[BenchRow] = field(default_factory=list)
    fits: dict[tuple[str, str], SlopeFit] = field(default_factory=dict)

    def family_rows(self, family: str) -> list[BenchRow]:
        return [r for r in self.rows if r.family == family]


def fit_loglog(n: Sequence[float], y: Sequence[float]) -> SlopeFit:
    """Least-squares slope of log y on log n with a 95% confidence interval."""
    n, y = np.asarray(n, dtype=float), np.asarray(y, dtype=float)
    if n.size < 3:
        raise BenchError("need at least three points for a slope fit")
    if (y <= 0).any():
        return SlopeFit(0.0, 0.0, 0.0, 1.0)
    res = stats.linregress(np.log(n), np.log(y))
    t = stats.t.ppf(0.975, n.size - 2)
    return SlopeFit(float(res.slope), float(res.slope - t * res.stderr), float(res.slope + t * res.stderr), float(res.rvalue**2))


def cumulative_cond_ops(cfg: ModelConfig, n_s: int) -> int:
    """Conditioning work summed over steps 1..n_s (one point per step)."""
    L, H = cfg.layers, cfg.heads
    n = n_s
    if cfg.family == "cnp":
        return 0
    if cfg.family in ("inctnp", "inctnp_seq"):
        return L * H * n * (n + 1) // 2
    if cfg.family == "tnpd":
        return L * H * n * (n + 1) * (2 * n + 1) // 6
    lat = cfg.lbanp_latents
    return L * H * (lat * n * (n + 1) // 2 + lat * lat * n)


def measure_step(cfg: ModelConfig, n_s: int, n_t: int, seed: int, repeats: int = 1) -> tuple[int, int, float]:
    """Stream context up to ``n_s - 1`` points, then time and count step ``n_s``.

    Returns (conditioning ops, query ops for ``n_t`` targets, median wall us)."""
    rng = np.random.default_rng(seed)
    model = build_model(cfg, seed)
    X = rng.uniform(-2, 2, size=(1, n_s, cfg.d_x))
    Y = rng.standard_normal((1, n_s, cfg.d_y))
    base = StreamSession(model)
    if n_s > 1:
        base.observe(X[:, :-1], Y[:, :-1])
        base.refresh()
    walls, cond = [], None
    for _ in range(max(1, repeats)):
        s = base.fork()
        tic = time.perf_counter()
        s.observe(X[:, -1:], Y[:, -1:])
        s.refresh()
        walls.append(1e6 * (time.perf_counter() - tic))
        cond = s.ledger.current.cond_ops
    s.predict(rng.uniform(-2, 2, size=(1, n_t, cfg.d_x)))
    return int(cond), int(s.ledger.current.query_ops), float(np.median(walls))


def bench_scaling(
    families: Sequence[str],
    grid: Sequence[int],
    repeats: int = 1,
    n_t: int = 16,
    seed: int = 0,
    **model_kw,
) -> BenchResult:
    grid = [int(n) for n in grid]
    if len(grid) < 4:
        raise BenchError("the N_s grid needs at least 4 points")
    if any(b <= a for a, b in zip(grid, grid[1:])) or grid[0] < 1:
        raise BenchError("the N_s grid must be strictly increasing and positive")
    model_kw.setdefault("dtype", "float32")
    result = BenchResult()
    for fam in families:
        cfg = ModelConfig(family=fam, **model_kw)
        for n in grid:
            cond, q, wall = measure_step(cfg, n, n_t, seed, repeats)
            if cond != conditioning_ops(cfg, n) or q != query_ops(cfg, n, n_t):
                raise BenchError(
                    f"{fam} at N_s={n}: measured ({cond}, {q}) ops but closed form gives "
                    f"({conditioning_ops(cfg, n)}, {query_ops(cfg, n, n_t)})"
                )
            result.rows.append(BenchRow(fam, n, cond, q, cumulative_cond_ops(cfg, n), wall))
        rows = result.family_rows(fam)
        ns = [r.n_s for r in rows]
        result.fits[(fam, "cond_ops")] = fit_loglog(ns, [r.cond_ops for r in rows])
        result.fits[(fam, "cum_cond_ops")] = fit_loglog(ns, [r.cum_cond_ops for r in rows])
        result.fits[(fam, "query_ops")] = fit_loglog(ns, [r.query_ops for r in rows])
        result.fits[(fam, "wall_us")] = fit_loglog(ns, [max(r.wall_us, 1e-9) for r in rows])
    return result


def fmt(v) -> str:
    """Locale-independent number formatting for CSV cells."""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return repr(v) if math.isfinite(v) else ("nan" if math.isnan(v) else ("inf" if v > 0 else "-inf"))


def write_bench_csv(result: BenchResult, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["family", "n_s", "cond_ops", "query_ops", "cum_cond_ops", "wall_us"])
        for r in result.rows:
            w.writerow([r.family, r.n_s, r.cond_ops, r.query_ops, r.cum_cond_ops, fmt(r.wall_us)])


def write_fit_csv(result: BenchResult, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["family", "metric", "slope", "ci_low", "ci_high", "r2"])
        for (fam, metric), f in result.fits.items():
            w.writerow([fam, metric, fmt(f.slope), fmt(f.lo), fmt(f.hi), fmt(f.r2)])
