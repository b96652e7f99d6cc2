"""Transformer building blocks: MLPs, masked multi-head attention, pre-norm
residual blocks and the append-only key/value cache.

Parameters live in flat ``{name: array}`` mappings; every block function takes
the mapping plus a name prefix, so the same code runs on plain arrays (wrapped
as untaped tensors) and on taped leaves during training.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .tensor import Tensor

# Above this many score entries an untaped attention call is evaluated in
# query chunks to bound peak memory.
CHUNK_SCORES = 1 << 24


class OpCounter:
    """Tally of attention score entries (one per query/key pair per head)."""

    __slots__ = ("score_ops", "calls")

    def __init__(self):
        self.score_ops = 0
        self.calls = 0

    def add(self, n: int) -> None:
        self.score_ops += int(n)
        self.calls += 1

    def reset(self) -> None:
        self.score_ops = 0
        self.calls = 0


@dataclass(frozen=True)
class AttentionShape:
    d_model: int
    heads: int
    d_qk: int  # per-head query/key width
    d_v: int  # per-head value width

    @property
    def scale(self) -> float:
        return 1.0 / np.sqrt(self.d_qk)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float64) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


def init_mlp(rng, prefix: str, sizes: list[int], dtype=np.float64) -> dict[str, np.ndarray]:
    params = {}
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        params[f"{prefix}.w{i}"] = glorot(rng, a, b, dtype)
        params[f"{prefix}.b{i}"] = np.zeros(b, dtype=dtype)
    return params


def init_attention(rng, prefix: str, shape: AttentionShape, dtype=np.float64) -> dict[str, np.ndarray]:
    d, h = shape.d_model, shape.heads
    return {
        f"{prefix}.wq": glorot(rng, d, h * shape.d_qk, dtype),
        f"{prefix}.wk": glorot(rng, d, h * shape.d_qk, dtype),
        f"{prefix}.wv": glorot(rng, d, h * shape.d_v, dtype),
        f"{prefix}.wo": glorot(rng, h * shape.d_v, d, dtype),
        f"{prefix}.bo": np.zeros(d, dtype=dtype),
    }


def init_block(rng, prefix: str, shape: AttentionShape, dtype=np.float64) -> dict[str, np.ndarray]:
    d = shape.d_model
    params = init_attention(rng, f"{prefix}.attn", shape, dtype)
    params.update(
        {
            f"{prefix}.ln1.g": np.ones(d, dtype=dtype),
            f"{prefix}.ln1.b": np.zeros(d, dtype=dtype),
            f"{prefix}.ln2.g": np.ones(d, dtype=dtype),
            f"{prefix}.ln2.b": np.zeros(d, dtype=dtype),
        }
    )
    params.update(init_mlp(rng, f"{prefix}.mlp", [d, d, d], dtype))
    return params


def mlp_forward(x, p: Mapping[str, Tensor], prefix: str, n_layers: int) -> Tensor:
    """Affine layers with ReLU between them (none after the last)."""
    h = x
    for i in range(n_layers):
        h = T.add(T.matmul(h, p[f"{prefix}.w{i}"]), p[f"{prefix}.b{i}"])
        if i < n_layers - 1:
            h = T.relu(h)
    return h


# --- masks -----------------------------------------------------------------


def causal_mask(n_q: int, n_k: int | None = None, offset: int = 0) -> np.ndarray:
    """Mask where query ``i`` sees keys ``j <= i + offset``; 0 visible, -inf hidden."""
    n_k = n_q if n_k is None else n_k
    rows = np.arange(n_q)[:, None] + offset
    cols = np.arange(n_k)[None, :]
    return np.where(cols <= rows, 0.0, -np.inf)


def build_causal_mask(n: int) -> np.ndarray:
    if n < 1:
        raise ValueError("causal mask needs n >= 1")
    return causal_mask(n)


# --- attention -------------------------------------------------------------


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(..., n, heads * w) -> (..., heads, n, w)."""
    *lead, n, width = x.shape
    x = T.reshape(x, (*lead, n, heads, width // heads))
    return T.swapaxes(x, -2, -3)


def merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, w = x.shape
    x = T.swapaxes(x, -2, -3)
    return T.reshape(x, (*lead, n, h * w))


def project_kv(x, p: Mapping[str, Tensor], prefix: str, heads: int) -> tuple[Tensor, Tensor]:
    k = split_heads(T.matmul(x, p[f"{prefix}.wk"]), heads)
    v = split_heads(T.matmul(x, p[f"{prefix}.wv"]), heads)
    return k, v


def project_q(x, p: Mapping[str, Tensor], prefix: str, heads: int) -> Tensor:
    return split_heads(T.matmul(x, p[f"{prefix}.wq"]), heads)


def _count(counter: OpCounter | None, q: Tensor, k: Tensor) -> None:
    if counter is not None:
        lead = int(np.prod(np.broadcast_shapes(q.shape[:-2], k.shape[:-2])))
        counter.add(lead * q.shape[-2] * k.shape[-2])


def scaled_scores(q, k, scale: float) -> Tensor:
    return T.mul(T.matmul(q, T.swapaxes(k, -1, -2)), scale)


def attend(q: Tensor, k: Tensor, v: Tensor, scale: float, mask=None, counter: OpCounter | None = None) -> Tensor:
    """softmax(q k^T * scale + mask) v over head-split tensors."""
    _count(counter, q, k)
    taped = any(isinstance(t, Tensor) and t.tape is not None for t in (q, k, v))
    n_q, n_k = q.shape[-2], k.shape[-2]
    lead = int(np.prod(q.shape[:-2]))
    if not taped and lead * n_q * n_k > CHUNK_SCORES:
        return _attend_chunked(q, k, v, scale, mask)
    w = T.masked_softmax(scaled_scores(q, k, scale), mask)
    return T.matmul(w, v)


def _attend_chunked(q: Tensor, k: Tensor, v: Tensor, scale: float, mask) -> Tensor:
    n_q, n_k = q.shape[-2], k.shape[-2]
    lead = int(np.prod(q.shape[:-2]))
    step = max(1, CHUNK_SCORES // max(1, lead * n_k))
    m = None if mask is None else np.asarray(mask)
    parts = []
    for start in range(0, n_q, step):
        stop = min(n_q, start + step)
        qc = Tensor(q.data[..., start:stop, :])
        mc = None if m is None else m[..., start:stop, :]
        w = T.masked_softmax(scaled_scores(qc, k, scale), mc)
        parts.append(T.matmul(w, v).data)
    return Tensor(np.concatenate(parts, axis=-2))


def output_projection(heads_out: Tensor, p: Mapping[str, Tensor], prefix: str) -> Tensor:
    return T.add(T.matmul(merge_heads(heads_out), p[f"{prefix}.wo"]), p[f"{prefix}.bo"])


def attention(
    queries,
    keys,
    values,
    p: Mapping[str, Tensor],
    prefix: str,
    shape: AttentionShape,
    mask=None,
    counter: OpCounter | None = None,
) -> Tensor:
    """Multi-head attention: per-head softmax(Q K^T / sqrt(d_qk) + mask) V, heads
    concatenated and passed through the output projection."""
    h = shape.heads
    q = project_q(queries, p, prefix, h)
    k = split_heads(T.matmul(keys, p[f"{prefix}.wk"]), h)
    v = split_heads(T.matmul(values, p[f"{prefix}.wv"]), h)
    if mask is not None:
        mask = np.asarray(mask)
        if mask.shape[-2:] != (q.shape[-2], k.shape[-2]):
            raise T.ShapeError(f"mask shape {mask.shape} does not match ({q.shape[-2]}, {k.shape[-2]})")
    return output_projection(attend(q, k, v, shape.scale, mask, counter), p, prefix)


def _ln(x, p, prefix, which):
    return T.layer_norm(x, p[f"{prefix}.{which}.g"], p[f"{prefix}.{which}.b"])


def _ffn(x, p, prefix):
    return T.add(x, mlp_forward(_ln(x, p, prefix, "ln2"), p, f"{prefix}.mlp", 2))


def residual_block(
    x_q,
    x_kv,
    p: Mapping[str, Tensor],
    prefix: str,
    shape: AttentionShape,
    mask=None,
    counter: OpCounter | None = None,
) -> Tensor:
    """Pre-norm block: Z~ = Z + Attn(LN1(Z), LN1(X_kv)); Z = Z~ + MLP(LN2(Z~)).

    Pass ``x_kv=None`` (or ``x_q`` itself) for self-attention.
    """
    hq = _ln(x_q, p, prefix, "ln1")
    hkv = hq if x_kv is None or x_kv is x_q else _ln(x_kv, p, prefix, "ln1")
    z = T.add(x_q, attention(hq, hkv, hkv, p, f"{prefix}.attn", shape, mask, counter))
    return _ffn(z, p, prefix)


def cached_kv(x_kv, p: Mapping[str, Tensor], prefix: str, heads: int) -> tuple[Tensor, Tensor]:
    """Keys and values a block would derive from ``x_kv`` (layer norm included)."""
    return project_kv(_ln(x_kv, p, prefix, "ln1"), p, f"{prefix}.attn", heads)


def residual_block_cached(
    x_q,
    k: Tensor,
    v: Tensor,
    p: Mapping[str, Tensor],
    prefix: str,
    shape: AttentionShape,
    mask=None,
    counter: OpCounter | None = None,
) -> Tensor:
    """:func:`residual_block` with keys/values already projected (see :func:`cached_kv`)."""
    hq = _ln(x_q, p, prefix, "ln1")
    q = project_q(hq, p, f"{prefix}.attn", shape.heads)
    a = attend(q, k, v, shape.scale, mask, counter)
    z = T.add(x_q, output_projection(a, p, f"{prefix}.attn"))
    return _ffn(z, p, prefix)


# --- KV cache --------------------------------------------------------------


class KVCache:
    """Per-layer append-only key/value buffers.

    Each layer holds one or more named slots (``"self"`` for the causal
    encoder, plus whatever the model adds). Buffers have shape
    ``(batch, heads, capacity, width)`` and grow by doubling; rows below
    ``n_cached`` are never written again.
    """

    def __init__(self, n_layers: int, slots: tuple[str, ...] = ("self",)):
        self.n_layers = n_layers
        self.slots = tuple(slots)
        self.n_cached = 0
        self._k: list[dict[str, np.ndarray]] = [{} for _ in range(n_layers)]
        self._v: list[dict[str, np.ndarray]] = [{} for _ in range(n_layers)]
        self.max_tokens: int | None = None

    def _ensure(self, layer: int, slot: str, like_k: np.ndarray, like_v: np.ndarray, need: int) -> None:
        buf = self._k[layer].get(slot)
        if buf is not None and buf.shape[-2] >= need:
            if buf.shape[:2] != like_k.shape[:2] or buf.shape[-1] != like_k.shape[-1]:
                raise T.ShapeError("new keys do not match cached layout")
            return
        cap = max(need, 8 if buf is None else 2 * buf.shape[-2])
        lead_k = like_k.shape[:-2]
        lead_v = like_v.shape[:-2]
        new_k = np.zeros((*lead_k, cap, like_k.shape[-1]), dtype=like_k.dtype)
        new_v = np.zeros((*lead_v, cap, like_v.shape[-1]), dtype=like_v.dtype)
        if buf is not None:
            if buf.shape[:-2] != lead_k or buf.shape[-1] != like_k.shape[-1]:
                raise T.ShapeError("new keys do not match cached layout")
            new_k[..., : self.n_cached, :] = buf[..., : self.n_cached, :]
            new_v[..., : self.n_cached, :] = self._v[layer][slot][..., : self.n_cached, :]
        self._k[layer][slot] = new_k
        self._v[layer][slot] = new_v

    def write(self, layer: int, slot: str, k: np.ndarray, v: np.ndarray) -> None:
        """Stage ``m`` new rows at positions ``n_cached .. n_cached+m``.

        Staged rows become visible through :meth:`get` with ``pending`` and
        permanent after :meth:`commit`.
        """
        m = k.shape[-2]
        self._ensure(layer, slot, k, v, self.n_cached + m)
        self._k[layer][slot][..., self.n_cached : self.n_cached + m, :] = k
        self._v[layer][slot][..., self.n_cached : self.n_cached + m, :] = v

    def get(self, layer: int, slot: str, pending: int = 0) -> tuple[np.ndarray, np.ndarray]:
        n = self.n_cached + pending
        if slot not in self._k[layer]:
            raise KeyError(f"cache slot {slot!r} empty at layer {layer}")
        return self._k[layer][slot][..., :n, :], self._v[layer][slot][..., :n, :]

    def commit(self, m: int) -> None:
        if self.max_tokens is not None and self.n_cached + m > self.max_tokens:
            raise MemoryError(f"KV cache cap of {self.max_tokens} tokens exceeded")
        self.n_cached += m

    def copy(self) -> KVCache:
        other = KVCache(self.n_layers, self.slots)
        other.n_cached = self.n_cached
        other.max_tokens = self.max_tokens
        other._k = [{s: a.copy() for s, a in layer.items()} for layer in self._k]
        other._v = [{s: a.copy() for s, a in layer.items()} for layer in self._v]
        return other

    def snapshot(self) -> list[dict[str, tuple[bytes, bytes]]]:
        """Byte images of committed rows, for append-only assertions."""
        out = []
        for layer in range(self.n_layers):
            out.append({s: tuple(a.tobytes() for a in self.get(layer, s)) for s in self._k[layer]})
        return out

    def nbytes(self) -> int:
        return sum(a.nbytes for layer in self._k + self._v for a in layer.values())


def kv_extend(
    cache: KVCache,
    new_tokens,
    p: Mapping[str, Tensor],
    prefixes: list[str],
    shape: AttentionShape,
    counter: OpCounter | None = None,
    commit: bool = True,
    cross_prefixes: list[str] | None = None,
) -> list[Tensor]:
    """Run ``m`` new tokens through the causal self-attention stack.

    Each new token attends to every cached token and to the new tokens up to
    and including itself. Returns the per-layer outputs for the new tokens
    only; the cache grows by ``m`` (staged if ``commit`` is false, so the
    caller can add more slots before committing).

    With ``cross_prefixes``, each layer's output is also projected into the
    keys/values of that layer's cross-attention block (slot ``"cross"``), which
    is what target queries read.
    """
    if len(prefixes) != cache.n_layers:
        raise ValueError(f"cache has {cache.n_layers} layers, got {len(prefixes)} block prefixes")
    x = new_tokens if isinstance(new_tokens, Tensor) else Tensor(new_tokens)
    if x.shape[-1] != shape.d_model:
        raise T.ShapeError(f"token width {x.shape[-1]} does not match d_model={shape.d_model}")
    m = x.shape[-2]
    mask = causal_mask(m, cache.n_cached + m, offset=cache.n_cached)
    outputs = []
    for layer, prefix in enumerate(prefixes):
        k_new, v_new = cached_kv(x, p, prefix, shape.heads)
        cache.write(layer, "self", k_new.data, v_new.data)
        k_all, v_all = cache.get(layer, "self", pending=m)
        x = residual_block_cached(x, Tensor(k_all), Tensor(v_all), p, prefix, shape, mask, counter)
        if cross_prefixes is not None:
            k_c, v_c = cached_kv(x, p, cross_prefixes[layer], shape.heads)
            cache.write(layer, "cross", k_c.data, v_c.data)
        outputs.append(x)
    if commit:
        cache.commit(m)
    return outputs
