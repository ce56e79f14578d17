"""Prototype-based cross-attention and the standard masked baseline.

Queries ``O`` are ``L x D`` tensors; a pyramid level ``R_s`` is a
``D x h x w`` map, flattened to ``S = h*w`` tokens. Attention masks are plain
``L x S`` arrays holding ``0`` (open) or ``-inf`` (blocked) and are shared
across heads.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module, param, xavier
from .tensor import Tensor, flop_stage

NEG_INF = -np.inf

_tape_local = threading.local()


class DecisionTape:
    """Discrete choices (prototype indices, attention masks) in call order.

    The first pass records; after :meth:`rewind` every pass replays the
    recorded values, so finite differences see a single smooth branch.
    """

    def __init__(self):
        self.items: list = []
        self.pos: int | None = None

    def rewind(self) -> None:
        self.pos = 0

    def decide(self, compute: Callable[[], object]):
        if self.pos is None:
            value = compute()
            self.items.append(value)
            return value
        value = self.items[self.pos]
        self.pos += 1
        return value


@contextlib.contextmanager
def decision_tape(tape: DecisionTape) -> Iterator[DecisionTape]:
    prev = getattr(_tape_local, "tape", None)
    _tape_local.tape = tape
    try:
        yield tape
    finally:
        _tape_local.tape = prev


def decide(compute: Callable[[], object]):
    tape = getattr(_tape_local, "tape", None)
    return compute() if tape is None else tape.decide(compute)


@dataclass
class PrototypeSelection:
    indices: np.ndarray  # heads x L
    prototypes: Tensor  # heads x L x d_h


def apply_fallback(mask: np.ndarray) -> np.ndarray:
    """Open every position of any query whose row is fully blocked."""
    mask = np.array(mask, dtype=np.float64)
    closed = np.all(np.isneginf(mask), axis=-1)
    mask[closed] = 0.0
    return mask


def build_attention_mask(prev_mask_logits: np.ndarray, size: tuple[int, int] | None = None) -> np.ndarray:
    """``L x h x w`` mask logits -> ``L x (h_s*w_s)`` attention mask.

    Logits are bilinearly resized to ``size`` first; a position stays open
    where ``sigmoid(logit) > 0.5``, i.e. ``logit > 0``.
    """
    logits = np.asarray(prev_mask_logits, dtype=np.float64)
    if size is not None and tuple(size) != logits.shape[-2:]:
        logits = T.resize_bilinear(logits, *size)
    mask = np.where(logits > 0.0, 0.0, NEG_INF).reshape(logits.shape[0], -1)
    return apply_fallback(mask)


def compute_affinity(V: Tensor, Tq: Tensor) -> Tensor:
    """``S x d_h`` keys against ``L x d_h`` queries -> ``S x L`` affinities."""
    if V.shape[-1] != Tq.shape[-1]:
        raise T.ShapeError(f"affinity: key dim {V.shape} vs query dim {Tq.shape}")
    return V @ Tq.T


def select_prototypes(A: Tensor, N: np.ndarray, V: Tensor) -> PrototypeSelection:
    """Masked argmax over the spatial axis of ``A`` (``[..., S, L]``).

    ``N`` is ``L x S``; fully blocked rows are reopened before the argmax.
    Works on a single head (``S x L``) or stacked heads (``H x S x L``).
    """
    N = apply_fallback(N)
    if N.shape != A.shape[-1:] + A.shape[-2:-1]:
        raise T.ShapeError(f"select_prototypes: mask {N.shape} does not fit affinity {A.shape}")
    masked = A.detach() + Tensor(N.T)
    _, idx = T.reduce_argmax(masked, axis=-2)
    idx = decide(lambda: idx)
    return PrototypeSelection(idx, T.gather_rows(V, idx))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, d = x.shape
    return x.reshape(n, heads, d // heads).transpose(1, 0, 2)


def _merge_heads(x: Tensor) -> Tensor:
    h, n, dh = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * dh)


class PBCAParams(Module):
    """Weights of one prototype-based cross-attention block.

    ``w1`` and ``beta`` are per head; ``w2`` acts on the concatenated heads.
    """

    def __init__(self, rng: np.random.Generator, dim: int, heads: int, inner: int | None = None):
        inner = inner or dim
        if inner % heads:
            raise ValueError(f"attention width {inner} not divisible by {heads} heads")
        dh = inner // heads
        self.heads = heads
        self.key_proj = Linear(rng, dim, inner, bias=False)
        self.query_proj = Linear(rng, dim, inner, bias=False)
        self.w1 = xavier(rng, dh, dh, (heads, dh, dh))
        self.beta = param(np.ones((heads, dh)))
        self.w2 = xavier(rng, inner, dim, (inner, dim))


def pbca_forward(
    O_in: Tensor,
    R_s: Tensor,
    N: np.ndarray,
    params: PBCAParams,
    query_source: Tensor | None = None,
) -> tuple[Tensor, np.ndarray]:
    """Refine queries with one prototype per (query, head).

    ``query_source`` feeds the query projection (a normalized copy of
    ``O_in`` inside the decoder); the residual always adds ``O_in``.
    Returns the refined ``L x D`` queries and the ``heads x L`` indices.
    """
    D = R_s.shape[0]
    if O_in.shape[1] != D:
        raise T.ShapeError(f"pbca: queries {O_in.shape} vs features {R_s.shape}")
    src = O_in if query_source is None else query_source
    H = params.heads
    with flop_stage("projection"):
        tokens = R_s.reshape(D, -1).T
        V = _split_heads(params.key_proj(tokens), H)
        Tq = _split_heads(params.query_proj(src), H)
    with flop_stage("affinity"):
        A = V @ Tq.T
    with flop_stage("selection"):
        sel = select_prototypes(A, N, V)
    with flop_stage("interaction"):
        Vp = sel.prototypes
        U = (Tq * Vp) @ params.w1
        Z = params.beta.reshape(H, 1, -1) * T.l2_normalize(U, axis=-1) + Vp
    with flop_stage("output"):
        O_out = _merge_heads(Z) @ params.w2 + O_in
    return O_out, sel.indices


class StandardAttentionParams(Module):
    def __init__(self, rng: np.random.Generator, dim: int, heads: int, inner: int | None = None):
        inner = inner or dim
        if inner % heads:
            raise ValueError(f"attention width {inner} not divisible by {heads} heads")
        self.heads = heads
        self.key_proj = Linear(rng, dim, inner, bias=False)
        self.query_proj = Linear(rng, dim, inner, bias=False)
        self.value_proj = Linear(rng, dim, inner, bias=False)
        self.out_proj = xavier(rng, inner, dim, (inner, dim))


def standard_masked_cross_attention(
    O_in: Tensor,
    R_s: Tensor,
    N: np.ndarray,
    params: StandardAttentionParams,
    query_source: Tensor | None = None,
) -> Tensor:
    """Softmax cross-attention over every spatial token, masked by ``N``."""
    D = R_s.shape[0]
    if O_in.shape[1] != D:
        raise T.ShapeError(f"cross-attention: queries {O_in.shape} vs features {R_s.shape}")
    src = O_in if query_source is None else query_source
    H = params.heads
    N = apply_fallback(N)
    with flop_stage("projection"):
        tokens = R_s.reshape(D, -1).T
        K = _split_heads(params.key_proj(tokens), H)
        Q = _split_heads(params.query_proj(src), H)
        Vv = _split_heads(params.value_proj(tokens), H)
    with flop_stage("affinity"):
        scores = (Q @ K.T) * (1.0 / np.sqrt(K.shape[-1]))
    with flop_stage("selection"):
        attn = T.softmax(scores + Tensor(N), axis=-1)
    with flop_stage("interaction"):
        ctx = attn @ Vv
    with flop_stage("output"):
        return _merge_heads(ctx) @ params.out_proj + O_in


class SelfAttention(Module):
    def __init__(self, rng: np.random.Generator, dim: int, heads: int):
        self.heads = heads
        self.q = Linear(rng, dim, dim)
        self.k = Linear(rng, dim, dim)
        self.v = Linear(rng, dim, dim)
        self.out = Linear(rng, dim, dim)

    def __call__(self, x: Tensor) -> Tensor:
        H = self.heads
        q, k, v = (_split_heads(f(x), H) for f in (self.q, self.k, self.v))
        attn = T.softmax((q @ k.T) * (1.0 / np.sqrt(q.shape[-1])), axis=-1)
        return self.out(_merge_heads(attn @ v))


class FeedForward(Module):
    def __init__(self, rng: np.random.Generator, dim: int, hidden: int):
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, dim)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(x)))


class DecoderLayer(Module):
    """Pre-norm block: cross-attention, query self-attention, feed-forward."""

    def __init__(self, rng: np.random.Generator, dim: int, heads: int, ffn_dim: int, use_pbca: bool = True):
        self.use_pbca = use_pbca
        self.norm_cross = LayerNorm(dim)
        if use_pbca:
            self.cross = PBCAParams(rng, dim, heads)
        else:
            self.cross = StandardAttentionParams(rng, dim, heads)
        self.norm_self = LayerNorm(dim)
        self.self_attn = SelfAttention(rng, dim, heads)
        self.norm_ffn = LayerNorm(dim)
        self.ffn = FeedForward(rng, dim, ffn_dim)

    def __call__(self, O_in: Tensor, R_s: Tensor, N: np.ndarray) -> Tensor:
        q = self.norm_cross(O_in)
        if self.use_pbca:
            x, _ = pbca_forward(O_in, R_s, N, self.cross, query_source=q)
        else:
            x = standard_masked_cross_attention(O_in, R_s, N, self.cross, query_source=q)
        x = x + self.self_attn(self.norm_self(x))
        return x + self.ffn(self.norm_ffn(x))


def decoder_layer(O_in: Tensor, R_s: Tensor, N: np.ndarray, params: DecoderLayer) -> Tensor:
    return params(O_in, R_s, N)
