"""Cross-modal attention fusion with analytic gradients.

The core map is scaled dot-product attention act(Q K^T / sqrt(d)) V with a
selectable activation: row-wise softmax, element-wise sigmoid, row-wise
min-max rescaling, or column-wise (per key channel) softmax. Visual features
act as queries against audio keys/values, and the attended audio is added
back onto the visual features. With the row-wise activations each output
pixel depends on its own query row only; the channel activation normalizes
over the query axis and therefore couples pixels deliberately. Everything
is float64 numpy; backward passes are exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ACTIVATIONS = ("softmax", "sigmoid", "minmax", "channel")
MINMAX_EPS = 1e-8


class FusionError(ValueError):
    pass


@dataclass
class ProjectionWeights:
    """Optional learned query/key/value projections, square in the feature dim."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray

    def __post_init__(self):
        shapes = {self.wq.shape, self.wk.shape, self.wv.shape}
        if len(shapes) != 1 or self.wq.ndim != 2 or self.wq.shape[0] != self.wq.shape[1]:
            raise FusionError(
                f"projection weights must share one square shape, got "
                f"{self.wq.shape}, {self.wk.shape}, {self.wv.shape}"
            )

    @classmethod
    def identity(cls, dim: int) -> "ProjectionWeights":
        eye = np.eye(dim)
        return cls(eye.copy(), eye.copy(), eye.copy())

    @classmethod
    def random(cls, dim: int, rng: np.random.Generator, scale: float = 0.5):
        return cls(*(np.eye(dim) + scale * rng.standard_normal((dim, dim))
                     for _ in range(3)))


def _check_activation(activation: str) -> None:
    if activation not in ACTIVATIONS:
        raise FusionError(
            f"unknown activation {activation!r}, expected one of {ACTIVATIONS}"
        )


def _activate(logits: np.ndarray, activation: str) -> np.ndarray:
    if activation == "softmax":
        shifted = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=-1, keepdims=True)
    if activation == "sigmoid":
        out = np.empty_like(logits)
        pos = logits >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-logits[pos]))
        en = np.exp(logits[~pos])
        out[~pos] = en / (1.0 + en)
        return out
    if activation == "minmax":
        lo = logits.min(axis=-1, keepdims=True)
        hi = logits.max(axis=-1, keepdims=True)
        # constant rows rescale to exactly 0 thanks to the epsilon
        return (logits - lo) / (hi - lo + MINMAX_EPS)
    # channel: softmax down each key column (over the query axis)
    shifted = logits - logits.max(axis=-2, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-2, keepdims=True)


def _activate_grad(
    logits: np.ndarray, attn: np.ndarray, d_attn: np.ndarray, activation: str
) -> np.ndarray:
    if activation == "softmax":
        inner = (d_attn * attn).sum(axis=-1, keepdims=True)
        return attn * (d_attn - inner)
    if activation == "sigmoid":
        return d_attn * attn * (1.0 - attn)
    if activation == "channel":
        inner = (d_attn * attn).sum(axis=-2, keepdims=True)
        return attn * (d_attn - inner)
    # minmax: f_j = (l_j - l_min) / (l_max - l_min + eps), per row
    lo_idx = logits.argmin(axis=-1)
    hi_idx = logits.argmax(axis=-1)
    span = np.take_along_axis(logits, hi_idx[..., None], -1) - np.take_along_axis(
        logits, lo_idx[..., None], -1
    ) + MINMAX_EPS
    d_logits = d_attn / span
    s_all = d_attn.sum(axis=-1, keepdims=True)
    s_weighted = (d_attn * attn).sum(axis=-1, keepdims=True)
    at_lo = (-s_all + s_weighted) / span
    at_hi = -s_weighted / span
    flat_d = d_logits.reshape(-1, logits.shape[-1])
    rows = np.arange(flat_d.shape[0])
    flat_d[rows, lo_idx.ravel()] += at_lo.ravel()
    flat_d[rows, hi_idx.ravel()] += at_hi.ravel()
    return flat_d.reshape(logits.shape)


def _split_heads(x: np.ndarray, num_heads: int) -> np.ndarray:
    n, dim = x.shape
    return x.reshape(n, num_heads, dim // num_heads).transpose(1, 0, 2)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    h, n, d = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * d)


@dataclass
class MhaCache:
    q_in: np.ndarray
    k_in: np.ndarray
    v_in: np.ndarray
    q: np.ndarray  # (heads, n, d)
    k: np.ndarray
    v: np.ndarray
    logits: np.ndarray
    attn: np.ndarray
    activation: str
    num_heads: int
    weights: ProjectionWeights | None


@dataclass
class MhaGrads:
    d_q: np.ndarray
    d_k: np.ndarray
    d_v: np.ndarray
    d_weights: ProjectionWeights | None


def mha_forward(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    activation: str = "softmax",
    num_heads: int = 1,
    weights: ProjectionWeights | None = None,
) -> tuple[np.ndarray, MhaCache]:
    _check_activation(activation)
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise FusionError("q, k, v must be rank-2 (rows, features)")
    if not (q.shape[1] == k.shape[1] == v.shape[1]):
        raise FusionError(
            f"feature dims disagree: q {q.shape[1]}, k {k.shape[1]}, "
            f"v {v.shape[1]}"
        )
    if k.shape[0] != v.shape[0]:
        raise FusionError(
            f"k has {k.shape[0]} rows but v has {v.shape[0]}"
        )
    dim = q.shape[1]
    if num_heads < 1 or dim % num_heads != 0:
        raise FusionError(
            f"feature dim {dim} not divisible into {num_heads} heads"
        )
    qp = q @ weights.wq if weights is not None else q
    kp = k @ weights.wk if weights is not None else k
    vp = v @ weights.wv if weights is not None else v
    qh = _split_heads(qp, num_heads)
    kh = _split_heads(kp, num_heads)
    vh = _split_heads(vp, num_heads)
    scale = np.sqrt(dim // num_heads)
    logits = qh @ kh.transpose(0, 2, 1) / scale
    attn = _activate(logits, activation)
    out = _merge_heads(attn @ vh)
    return out, MhaCache(q, k, v, qh, kh, vh, logits, attn, activation,
                         num_heads, weights)


def mha(q, k, v, activation: str = "softmax", num_heads: int = 1,
        weights: ProjectionWeights | None = None) -> np.ndarray:
    out, _ = mha_forward(q, k, v, activation, num_heads, weights)
    return out


def mha_grad(cache: MhaCache, d_out: np.ndarray) -> MhaGrads:
    d_out = np.asarray(d_out, dtype=np.float64)
    dim = cache.q_in.shape[1]
    scale = np.sqrt(dim // cache.num_heads)
    d_oh = _split_heads(d_out, cache.num_heads)
    d_attn = d_oh @ cache.v.transpose(0, 2, 1)
    d_vh = cache.attn.transpose(0, 2, 1) @ d_oh
    d_logits = _activate_grad(cache.logits, cache.attn, d_attn, cache.activation)
    d_qh = d_logits @ cache.k / scale
    d_kh = d_logits.transpose(0, 2, 1) @ cache.q / scale
    d_qp = _merge_heads(d_qh)
    d_kp = _merge_heads(d_kh)
    d_vp = _merge_heads(d_vh)
    w = cache.weights
    if w is None:
        return MhaGrads(d_qp, d_kp, d_vp, None)
    d_weights = ProjectionWeights(
        cache.q_in.T @ d_qp, cache.k_in.T @ d_kp, cache.v_in.T @ d_vp
    )
    return MhaGrads(d_qp @ w.wq.T, d_kp @ w.wk.T, d_vp @ w.wv.T, d_weights)


# ---------------------------------------------------------------------------
# visual-query fusion


@dataclass
class FusionResult:
    fused: np.ndarray  # same shape as the visual input
    cache: MhaCache | None
    visual_shape: tuple


@dataclass
class FusionGrads:
    d_visual: np.ndarray
    d_audio: np.ndarray
    d_weights: ProjectionWeights | None


def cross_attend(
    u_visual: np.ndarray,
    u_audio: np.ndarray,
    activation: str = "sigmoid",
    num_heads: int = 1,
    weights: ProjectionWeights | None = None,
    keep_cache: bool = True,
) -> FusionResult:
    """Fuse audio into a visual feature map: u_v + mha(u_v, u_a, u_a).

    ``u_visual`` may be (height, width, dim) or (pixels, dim); ``u_audio``
    is (tokens, dim). The visual rows are the queries, so the output at one
    pixel never depends on other pixels.
    """
    u_visual = np.asarray(u_visual, dtype=np.float64)
    u_audio = np.asarray(u_audio, dtype=np.float64)
    if u_visual.ndim not in (2, 3):
        raise FusionError(
            f"visual features must be rank 2 or 3, got rank {u_visual.ndim}"
        )
    if u_audio.ndim != 2:
        raise FusionError("audio features must be rank 2 (tokens, dim)")
    shape = u_visual.shape
    flat = u_visual.reshape(-1, shape[-1])
    attended, cache = mha_forward(
        flat, u_audio, u_audio, activation, num_heads, weights
    )
    fused = (flat + attended).reshape(shape)
    return FusionResult(fused, cache if keep_cache else None, shape)


def cross_attend_grad(result: FusionResult, upstream: np.ndarray) -> FusionGrads:
    if result.cache is None:
        raise FusionError("cross_attend_grad needs a cached forward "
                          "(call cross_attend with keep_cache=True)")
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != result.visual_shape:
        raise FusionError(
            f"upstream shape {upstream.shape} does not match forward "
            f"shape {result.visual_shape}"
        )
    flat_up = upstream.reshape(-1, result.visual_shape[-1])
    g = mha_grad(result.cache, flat_up)
    d_visual = (flat_up + g.d_q).reshape(result.visual_shape)
    # audio served as both keys and values
    d_audio = g.d_k + g.d_v
    return FusionGrads(d_visual, d_audio, g.d_weights)


def legacy_gated_fuse(
    u_visual: np.ndarray,
    u_audio: np.ndarray,
    activation: str = "softmax",
    num_heads: int = 1,
    weights: ProjectionWeights | None = None,
) -> np.ndarray:
    """Earlier-generation comparison mode: audio queries attend over pixels
    and the pooled result gates the visual features multiplicatively,
    u_v + u_v * mean_t(mha(u_a, u_v, u_v)). Forward only."""
    u_visual = np.asarray(u_visual, dtype=np.float64)
    u_audio = np.asarray(u_audio, dtype=np.float64)
    shape = u_visual.shape
    flat = u_visual.reshape(-1, shape[-1])
    attended = mha(u_audio, flat, flat, activation, num_heads, weights)
    gate = attended.mean(axis=0)
    return (flat + flat * gate).reshape(shape)
