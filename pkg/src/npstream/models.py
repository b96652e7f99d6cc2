"""Neural-process families sharing one embedder and one Gaussian decoder.

``cnp``         mean-pooled context embedding
``tnpd``        unmasked self-attention over the context, cross-attention from targets
``inctnp``      as ``tnpd`` with a causal context mask, so context updates are KV-cached
``inctnp_seq``  ``inctnp`` weights trained on every prefix of a sequence at once
``lbanp``       context compressed into a learned latent array

Every model exposes a static ``forward`` (differentiable, used for training)
and a streaming protocol: ``condition`` builds a context state, ``extend``
appends points to it and ``query`` decodes targets against it.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Mapping

import numpy as np

from . import nn
from . import tensor as T
from .tensor import Tensor

FAMILIES = ("cnp", "tnpd", "lbanp", "inctnp", "inctnp_seq")
CAUSAL_FAMILIES = ("inctnp", "inctnp_seq")
LOG_2PI = float(np.log(2.0 * np.pi))


class EmptyContextError(ValueError):
    """Raised when a prediction is requested without any context points."""


@dataclass
class ModelConfig:
    family: str = "inctnp"
    d_x: int = 1
    d_y: int = 1
    d_model: int = 128
    heads: int = 8
    layers: int = 5
    d_qk: int = 0  # per-head query/key width; 0 means d_model // heads
    sigma_min2: float = 0.0
    lbanp_latents: int = 32
    dtype: str = "float64"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise ValueError(f"unknown model family {self.family!r}; expected one of {', '.join(FAMILIES)}")
        for name in ("d_x", "d_y", "d_model", "heads", "layers"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if self.d_qk < 0:
            raise ValueError("d_qk must be >= 0")
        if self.sigma_min2 < 0:
            raise ValueError("sigma_min2 must be >= 0")
        if self.family == "lbanp" and self.lbanp_latents < 1:
            raise ValueError("lbanp_latents must be >= 1")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")

    @property
    def attention_shape(self) -> nn.AttentionShape:
        d_head = self.d_model // self.heads
        return nn.AttentionShape(self.d_model, self.heads, self.d_qk or d_head, d_head)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict[str, str]:
        return {k: str(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, values: Mapping[str, str]) -> ModelConfig:
        kinds = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in kinds:
                raise ValueError(f"unknown model config key {key!r}")
            kind = kinds[key]
            if kind == "int":
                kwargs[key] = int(raw)
            elif kind == "float":
                kwargs[key] = float(raw)
            else:
                kwargs[key] = str(raw)
        return cls(**kwargs)


@dataclass
class TaskBatch:
    """Context and target sets for a batch of tasks sharing N_c and N_t."""

    X_c: np.ndarray  # (B, N_c, d_x), rows in arrival order
    Y_c: np.ndarray  # (B, N_c, d_y)
    X_t: np.ndarray  # (B, N_t, d_x)
    Y_t: np.ndarray  # (B, N_t, d_y)

    def __post_init__(self):
        for name in ("X_c", "Y_c", "X_t", "Y_t"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.ndim != 3:
                raise ValueError(f"{name} must have shape (batch, points, dim), got {arr.shape}")
            setattr(self, name, arr)
        if self.X_c.shape[:2] != self.Y_c.shape[:2] or self.X_t.shape[:2] != self.Y_t.shape[:2]:
            raise ValueError("inputs and outputs disagree on batch or point count")
        if self.X_c.shape[0] != self.X_t.shape[0]:
            raise ValueError("context and target batch sizes differ")
        if self.X_c.shape[2] != self.X_t.shape[2] or self.Y_c.shape[2] != self.Y_t.shape[2]:
            raise ValueError("context and target feature widths differ")
        if self.n_target < 1:
            raise ValueError("a task needs at least one target point")

    @property
    def batch(self) -> int:
        return self.X_c.shape[0]

    @property
    def n_context(self) -> int:
        return self.X_c.shape[1]

    @property
    def n_target(self) -> int:
        return self.X_t.shape[1]

    @property
    def d_x(self) -> int:
        return self.X_c.shape[2]

    @property
    def d_y(self) -> int:
        return self.Y_c.shape[2]

    def item(self, i: int) -> TaskBatch:
        sl = slice(i, i + 1)
        return TaskBatch(self.X_c[sl], self.Y_c[sl], self.X_t[sl], self.Y_t[sl])


@dataclass
class GaussianPrediction:
    mean: Tensor  # (B, N_t, d_y)
    variance: Tensor

    def log_prob(self, y) -> Tensor:
        """Elementwise Gaussian log-density of ``y``."""
        resid = T.sub(y, self.mean)
        quad = T.div(T.square(resid), self.variance)
        return T.mul(T.add(T.add(T.log(self.variance), quad), LOG_2PI), -0.5)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return self.mean.data, self.variance.data


def gaussian_logpdf(y, mean, var) -> np.ndarray:
    y, mean, var = np.asarray(y), np.asarray(mean), np.asarray(var)
    return -0.5 * (LOG_2PI + np.log(var) + (y - mean) ** 2 / var)


# --- shared pieces ---------------------------------------------------------


def embed_points(p: Mapping[str, Tensor], X, Y_or_zero, flag: int) -> Tensor:
    """Embed ``[x, y, flag]`` rows; pass ``Y_or_zero=None`` with ``flag=1`` for targets."""
    X = X if isinstance(X, Tensor) else np.asarray(X)
    d_y = p["emb.w0"].shape[0] - X.shape[-1] - 1
    dtype = p["emb.w0"].dtype
    lead = X.shape[:-1]
    if Y_or_zero is None:
        Y_or_zero = np.zeros((*lead, d_y), dtype=dtype)
    flag_col = np.full((*lead, 1), float(flag), dtype=dtype)
    inputs = T.concat([_cast(X, dtype), _cast(Y_or_zero, dtype), flag_col], axis=-1)
    return nn.mlp_forward(inputs, p, "emb", 3)


def _cast(x, dtype):
    if isinstance(x, Tensor):
        return x
    return np.asarray(x, dtype=dtype)


def decode_gaussian(z_t, p: Mapping[str, Tensor], cfg: ModelConfig) -> GaussianPrediction:
    """Mean is the raw first half of the decoder output; variance is
    softplus(second half) + sigma_min2."""
    raw = nn.mlp_forward(z_t, p, "dec", 3)
    d_y = cfg.d_y
    mean = T.getitem(raw, (Ellipsis, slice(0, d_y)))
    var = T.add(T.softplus(T.getitem(raw, (Ellipsis, slice(d_y, 2 * d_y)))), cfg.sigma_min2)
    return GaussianPrediction(mean, var)


def _require_context(n: int) -> None:
    if n < 1:
        raise EmptyContextError("at least one context point is required; the null context is not supported")


def _as_batch(a, width: int, name: str) -> np.ndarray:
    """Promote ``(d,)`` / ``(n, d)`` / ``(B, n, d)`` inputs to rank 3."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1, 1)
    elif a.ndim == 1:
        # a run of scalar inputs, or a single vector-valued point
        a = a.reshape(1, -1, 1) if width == 1 else a.reshape(1, 1, -1)
    elif a.ndim == 2:
        a = a[None]
    if a.shape[-1] != width:
        raise T.ShapeError(f"{name} has feature width {a.shape[-1]}, expected {width}")
    return a


# --- context states -------------------------------------------------------


class ContextState:
    """Conditioning state of one stream of context points."""

    family = ""

    def __init__(self, X: np.ndarray, Y: np.ndarray):
        self.X = X
        self.Y = Y
        self.reencodes = 0

    @property
    def n(self) -> int:
        return self.X.shape[1]

    def _append(self, x: np.ndarray, y: np.ndarray) -> None:
        self.X = np.concatenate([self.X, x], axis=1)
        self.Y = np.concatenate([self.Y, y], axis=1)

    def fork(self) -> ContextState:
        raise NotImplementedError


class PooledState(ContextState):
    family = "cnp"

    def __init__(self, X, Y, total: np.ndarray):
        super().__init__(X, Y)
        self.total = total  # (B, d_model) running sum of embeddings

    def fork(self) -> PooledState:
        other = PooledState(self.X.copy(), self.Y.copy(), self.total.copy())
        other.reencodes = self.reencodes
        return other


class BufferState(ContextState):
    """Raw context buffer; encodings are rebuilt lazily when the buffer changed."""

    def __init__(self, X, Y, family: str):
        super().__init__(X, Y)
        self.family = family
        self.encoded: list | None = None

    def fork(self) -> BufferState:
        other = BufferState(self.X.copy(), self.Y.copy(), self.family)
        other.encoded = self.encoded  # read-only once built; replaced, never mutated
        other.reencodes = self.reencodes
        return other


class CachedState(ContextState):
    def __init__(self, X, Y, cache: nn.KVCache, family: str):
        super().__init__(X, Y)
        self.cache = cache
        self.family = family

    def fork(self) -> CachedState:
        other = CachedState(self.X.copy(), self.Y.copy(), self.cache.copy(), self.family)
        other.reencodes = self.reencodes
        return other


# --- models ----------------------------------------------------------------


class NeuralProcess:
    families: tuple[str, ...] = ()

    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray]):
        if cfg.family not in self.families:
            raise ValueError(f"config family {cfg.family!r} does not match model {type(self).__name__}")
        self.cfg = cfg
        self.params = params

    @property
    def family(self) -> str:
        return self.cfg.family

    @property
    def shape(self) -> nn.AttentionShape:
        return self.cfg.attention_shape

    def tensors(self) -> dict[str, Tensor]:
        return {k: Tensor(v) for k, v in self.params.items()}

    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    # static path
    def forward(self, p, X_c, Y_c, X_t, counter: nn.OpCounter | None = None) -> GaussianPrediction:
        raise NotImplementedError

    def predict(self, task: TaskBatch, counter: nn.OpCounter | None = None) -> GaussianPrediction:
        return self.forward(self.tensors(), task.X_c, task.Y_c, task.X_t, counter)

    def nll(self, p, task: TaskBatch) -> Tensor:
        pred = self.forward(p, task.X_c, task.Y_c, task.X_t)
        return T.neg(T.mean(pred.log_prob(task.Y_t.astype(self.cfg.np_dtype))))

    # streaming path
    def condition(self, X_c, Y_c, counter: nn.OpCounter | None = None) -> ContextState:
        raise NotImplementedError

    def extend(self, state: ContextState, x, y, counter: nn.OpCounter | None = None) -> ContextState:
        raise NotImplementedError

    def query(
        self,
        state: ContextState,
        X_t,
        counter: nn.OpCounter | None = None,
        cond_counter: nn.OpCounter | None = None,
    ) -> GaussianPrediction:
        raise NotImplementedError

    def _prep(self, X, Y=None):
        X = _as_batch(X, self.cfg.d_x, "X").astype(self.cfg.np_dtype)
        if Y is None:
            return X
        Y = _as_batch(Y, self.cfg.d_y, "Y").astype(self.cfg.np_dtype)
        if X.shape[:2] != Y.shape[:2]:
            raise T.ShapeError(f"inputs {X.shape} and outputs {Y.shape} disagree")
        return X, Y


def _init_embed_decode(rng, cfg: ModelConfig, dec_in: int) -> dict[str, np.ndarray]:
    dt = cfg.np_dtype
    d = cfg.d_model
    params = nn.init_mlp(rng, "emb", [cfg.d_x + cfg.d_y + 1, d, d, d], dt)
    params.update(nn.init_mlp(rng, "dec", [dec_in, d, d, 2 * cfg.d_y], dt))
    return params


class CNP(NeuralProcess):
    families = ("cnp",)

    @classmethod
    def init_params(cls, cfg: ModelConfig, rng) -> dict[str, np.ndarray]:
        return _init_embed_decode(rng, cfg, cfg.d_model + cfg.d_x)

    def _decode(self, p, z_mean, X_t) -> GaussianPrediction:
        X_t = _cast(X_t, self.cfg.np_dtype)
        n_t = X_t.shape[-2]
        z = T.broadcast_to(T.reshape(z_mean, (z_mean.shape[0], 1, z_mean.shape[-1])), (z_mean.shape[0], n_t, z_mean.shape[-1]))
        return decode_gaussian(T.concat([z, X_t], axis=-1), p, self.cfg)

    def forward(self, p, X_c, Y_c, X_t, counter=None) -> GaussianPrediction:
        _require_context(np.shape(X_c)[-2])
        z = embed_points(p, X_c, Y_c, 0)
        return self._decode(p, T.mean(z, axis=-2), X_t)

    def condition(self, X_c, Y_c, counter=None) -> PooledState:
        X, Y = self._prep(X_c, Y_c)
        total = embed_points(self.tensors(), X, Y, 0).data.sum(axis=-2)
        return PooledState(X, Y, total)

    def extend(self, state: PooledState, x, y, counter=None) -> PooledState:
        x, y = self._prep(x, y)
        state.total = state.total + embed_points(self.tensors(), x, y, 0).data.sum(axis=-2)
        state._append(x, y)
        return state

    def query(self, state: PooledState, X_t, counter=None, cond_counter=None) -> GaussianPrediction:
        _require_context(state.n)
        X_t = self._prep(X_t)
        return self._decode(self.tensors(), Tensor(state.total / state.n), X_t)


class TransformerNP(NeuralProcess):
    """TNP-D and its causal variants: per layer, context self-attention then
    target-to-context cross-attention. Only the context mask differs."""

    families = ("tnpd", "inctnp", "inctnp_seq")

    @classmethod
    def init_params(cls, cfg: ModelConfig, rng) -> dict[str, np.ndarray]:
        params = _init_embed_decode(rng, cfg, cfg.d_model)
        for l in range(cfg.layers):
            params.update(nn.init_block(rng, f"l{l}.sa", cfg.attention_shape, cfg.np_dtype))
            params.update(nn.init_block(rng, f"l{l}.ca", cfg.attention_shape, cfg.np_dtype))
        return params

    @property
    def causal(self) -> bool:
        return self.cfg.family in CAUSAL_FAMILIES

    @property
    def sa_prefixes(self) -> list[str]:
        return [f"l{l}.sa" for l in range(self.cfg.layers)]

    @property
    def ca_prefixes(self) -> list[str]:
        return [f"l{l}.ca" for l in range(self.cfg.layers)]

    def encode(self, p, z_c, z_t, mask_c=None, mask_t=None, counter=None) -> Tensor:
        sh = self.shape
        for sa, ca in zip(self.sa_prefixes, self.ca_prefixes):
            z_c = nn.residual_block(z_c, None, p, sa, sh, mask_c, counter)
            z_t = nn.residual_block(z_t, z_c, p, ca, sh, mask_t, counter)
        return z_t

    def forward(self, p, X_c, Y_c, X_t, counter=None) -> GaussianPrediction:
        n_c = np.shape(X_c)[-2]
        _require_context(n_c)
        z_c = embed_points(p, X_c, Y_c, 0)
        z_t = embed_points(p, X_t, None, 1)
        mask_c = nn.causal_mask(n_c) if self.causal else None
        return decode_gaussian(self.encode(p, z_c, z_t, mask_c, None, counter), p, self.cfg)

    def seq_forward(self, p, X, Y, counter=None) -> GaussianPrediction:
        """Predictions for positions 2..N of one joined sequence, each
        conditioned on exactly the points before it."""
        n = np.shape(X)[-2]
        if n < 2:
            raise ValueError("sequence training needs N >= 2")
        z_c = embed_points(p, X, Y, 0)
        z_t = embed_points(p, T.getitem(X, (Ellipsis, slice(1, None), slice(None))) if isinstance(X, Tensor) else np.asarray(X)[..., 1:, :], None, 1)
        # target row r stands for position r+2 and sees context columns 0..r
        mask_t = nn.causal_mask(n - 1, n)
        z_t = self.encode(p, z_c, z_t, nn.causal_mask(n), mask_t, counter)
        return decode_gaussian(z_t, p, self.cfg)

    def seq_nll(self, p, X, Y) -> Tensor:
        pred = self.seq_forward(p, X, Y)
        target = np.asarray(Y, dtype=self.cfg.np_dtype)[..., 1:, :]
        return T.neg(T.mean(pred.log_prob(target)))

    # streaming
    def condition(self, X_c, Y_c, counter=None) -> ContextState:
        X, Y = self._prep(X_c, Y_c)
        if self.causal:
            cache = nn.KVCache(self.cfg.layers, ("self", "cross"))
            state = CachedState(X[:, :0], Y[:, :0], cache, self.cfg.family)
            return self.extend(state, X, Y, counter) if X.shape[1] else state
        return BufferState(X, Y, self.cfg.family)

    def extend(self, state: ContextState, x, y, counter=None) -> ContextState:
        x, y = self._prep(x, y)
        if isinstance(state, CachedState):
            if x.shape[1]:
                p = self.tensors()
                z = embed_points(p, x, y, 0)
                nn.kv_extend(state.cache, z, p, self.sa_prefixes, self.shape, counter, cross_prefixes=self.ca_prefixes)
        else:
            state.encoded = None
        state._append(x, y)
        return state

    def _reencode(self, state: BufferState, counter) -> None:
        p = self.tensors()
        sh = self.shape
        z_c = embed_points(p, state.X, state.Y, 0)
        kv = []
        for sa, ca in zip(self.sa_prefixes, self.ca_prefixes):
            z_c = nn.residual_block(z_c, None, p, sa, sh, None, counter)
            k, v = nn.cached_kv(z_c, p, ca, sh.heads)
            kv.append((k, v))
        state.encoded = kv
        state.reencodes += 1

    def query(self, state: ContextState, X_t, counter=None, cond_counter=None) -> GaussianPrediction:
        _require_context(state.n)
        p = self.tensors()
        X_t = self._prep(X_t)
        if isinstance(state, CachedState):
            kv = [tuple(Tensor(a) for a in state.cache.get(l, "cross")) for l in range(self.cfg.layers)]
        else:
            if state.encoded is None:
                self._reencode(state, cond_counter)
            kv = state.encoded
        z_t = embed_points(p, X_t, None, 1)
        for ca, (k, v) in zip(self.ca_prefixes, kv):
            z_t = nn.residual_block_cached(z_t, k, v, p, ca, self.shape, None, counter)
        return decode_gaussian(z_t, p, self.cfg)


class LBANP(NeuralProcess):
    """Latent bottleneck: per layer U <- CA(U, Z_c), U <- SA(U), Z_t <- CA(Z_t, U)."""

    families = ("lbanp",)

    @classmethod
    def init_params(cls, cfg: ModelConfig, rng) -> dict[str, np.ndarray]:
        params = _init_embed_decode(rng, cfg, cfg.d_model)
        sh, dt = cfg.attention_shape, cfg.np_dtype
        params["latents"] = (rng.standard_normal((cfg.lbanp_latents, cfg.d_model)) / np.sqrt(cfg.d_model)).astype(dt)
        for l in range(cfg.layers):
            params.update(nn.init_block(rng, f"l{l}.cu", sh, dt))
            params.update(nn.init_block(rng, f"l{l}.su", sh, dt))
            params.update(nn.init_block(rng, f"l{l}.ct", sh, dt))
        return params

    def _latent_stack(self, p, z_c, counter=None) -> list[Tensor]:
        sh = self.shape
        batch = z_c.shape[0]
        lat = p["latents"]
        u = T.broadcast_to(T.reshape(lat, (1, *lat.shape)), (batch, *lat.shape))
        out = []
        for l in range(self.cfg.layers):
            u = nn.residual_block(u, z_c, p, f"l{l}.cu", sh, None, counter)
            u = nn.residual_block(u, None, p, f"l{l}.su", sh, None, counter)
            out.append(u)
        return out

    def _decode_targets(self, p, us, X_t, counter=None) -> GaussianPrediction:
        z_t = embed_points(p, X_t, None, 1)
        for l, u in enumerate(us):
            z_t = nn.residual_block(z_t, u, p, f"l{l}.ct", self.shape, None, counter)
        return decode_gaussian(z_t, p, self.cfg)

    def forward(self, p, X_c, Y_c, X_t, counter=None) -> GaussianPrediction:
        _require_context(np.shape(X_c)[-2])
        us = self._latent_stack(p, embed_points(p, X_c, Y_c, 0), counter)
        return self._decode_targets(p, us, X_t, counter)

    def condition(self, X_c, Y_c, counter=None) -> BufferState:
        X, Y = self._prep(X_c, Y_c)
        return BufferState(X, Y, "lbanp")

    def extend(self, state: BufferState, x, y, counter=None) -> BufferState:
        x, y = self._prep(x, y)
        state.encoded = None
        state._append(x, y)
        return state

    def query(self, state: BufferState, X_t, counter=None, cond_counter=None) -> GaussianPrediction:
        _require_context(state.n)
        p = self.tensors()
        if state.encoded is None:
            state.encoded = self._latent_stack(p, embed_points(p, state.X, state.Y, 0), cond_counter)
            state.reencodes += 1
        return self._decode_targets(p, state.encoded, self._prep(X_t), counter)


MODEL_CLASSES = {"cnp": CNP, "tnpd": TransformerNP, "inctnp": TransformerNP, "inctnp_seq": TransformerNP, "lbanp": LBANP}


def build_model(cfg: ModelConfig, seed: int = 0) -> NeuralProcess:
    cls = MODEL_CLASSES[cfg.family]
    rng = np.random.default_rng(seed)
    return cls(cfg, cls.init_params(cfg, rng))


def model_from_params(cfg: ModelConfig, params: dict[str, np.ndarray]) -> NeuralProcess:
    cls = MODEL_CLASSES[cfg.family]
    expected = cls.init_params(cfg, np.random.default_rng(0))
    missing = set(expected) - set(params)
    extra = set(params) - set(expected)
    if missing or extra:
        raise ValueError(f"parameter table mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
    for k, v in expected.items():
        if params[k].shape != v.shape:
            raise ValueError(f"parameter {k} has shape {params[k].shape}, expected {v.shape}")
    return cls(cfg, {k: np.asarray(params[k], dtype=cfg.np_dtype) for k in expected})


# --- op-count closed forms --------------------------------------------------


def conditioning_ops(cfg: ModelConfig, n_s: int) -> int:
    """Attention score entries spent bringing the context state up to date
    after the ``n_s``-th point arrives (one stream, one point per step)."""
    L, H = cfg.layers, cfg.heads
    if cfg.family == "cnp":
        return 0
    if cfg.family in CAUSAL_FAMILIES:
        return L * H * n_s
    if cfg.family == "tnpd":
        return L * H * n_s * n_s
    lat = cfg.lbanp_latents
    return L * H * (lat * n_s + lat * lat)


def query_ops(cfg: ModelConfig, n_s: int, n_t: int) -> int:
    L, H = cfg.layers, cfg.heads
    if cfg.family == "cnp":
        return 0
    if cfg.family == "lbanp":
        return L * H * n_t * cfg.lbanp_latents
    return L * H * n_s * n_t
