"""Transformer encoder pieces built on :mod:`metatrans.tensor`.

Every block here except positional embedding is a row map or an attention
over all rows, so each one commutes with a permutation of the time axis.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .tensor import DimensionError, Tensor

LN_EPS = 1e-5


def positional_embedding(T: int, d: int) -> np.ndarray:
    """Sinusoidal table: even columns sin(pos / 10000^(2i/d)), odd columns cos."""
    if T < 1:
        raise DimensionError(f"positional table needs T >= 1, got {T}")
    if d < 2 or d % 2:
        raise DimensionError(f"sinusoidal table needs an even d, got {d}")
    pos = np.arange(T, dtype=np.float64)[:, None]
    two_i = np.arange(0, d, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, two_i / d)
    table = np.empty((T, d))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return table


@dataclass
class EncoderBlockParams:
    """One encoder layer.

    Per-head projections are stacked along axis 0: ``wq[h]`` is the ``d x d_h``
    query map of head ``h``.
    """
    wq: Tensor  # H x d x d_h
    wk: Tensor
    wv: Tensor
    wo: Tensor  # (H*d_h) x d
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    w1: Tensor  # d x d_ff
    b1: Tensor
    w2: Tensor  # d_ff x d
    b2: Tensor

    @property
    def n_heads(self) -> int:
        return self.wq.shape[0]

    @property
    def d_head(self) -> int:
        return self.wq.shape[2]

    def named(self) -> dict[str, Tensor]:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    def validate(self) -> None:
        H, d, dh = self.wq.shape
        for w in (self.wk, self.wv):
            if w.shape != (H, d, dh):
                raise DimensionError("q/k/v projections disagree in shape")
        if self.wo.shape != (H * dh, d):
            raise DimensionError(f"output projection {self.wo.shape}, expected {(H * dh, d)}")
        d_ff = self.w1.shape[1]
        if self.w1.shape != (d, d_ff) or self.w2.shape != (d_ff, d):
            raise DimensionError("feed-forward weight shapes inconsistent")
        for v, n in ((self.b1, d_ff), (self.b2, d), (self.ln1_gain, d), (self.ln1_bias, d),
                     (self.ln2_gain, d), (self.ln2_bias, d)):
            if v.shape != (n,):
                raise DimensionError("bias / layer-norm vector has wrong length")


def init_encoder_block(rng: np.random.Generator, d: int, n_heads: int, d_head: int,
                       d_ff: int) -> EncoderBlockParams:
    def w(*shape, fan_in):
        return Tensor(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape), requires_grad=True)

    return EncoderBlockParams(
        wq=w(n_heads, d, d_head, fan_in=d),
        wk=w(n_heads, d, d_head, fan_in=d),
        wv=w(n_heads, d, d_head, fan_in=d),
        wo=w(n_heads * d_head, d, fan_in=n_heads * d_head),
        ln1_gain=Tensor(np.ones(d), requires_grad=True),
        ln1_bias=Tensor(np.zeros(d), requires_grad=True),
        ln2_gain=Tensor(np.ones(d), requires_grad=True),
        ln2_bias=Tensor(np.zeros(d), requires_grad=True),
        w1=w(d, d_ff, fan_in=d),
        b1=Tensor(np.zeros(d_ff), requires_grad=True),
        w2=w(d_ff, d, fan_in=d_ff),
        b2=Tensor(np.zeros(d), requires_grad=True),
    )


def self_attention(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor) -> Tensor:
    """Single-head scaled dot-product attention over the time axis of ``x[..., T, d]``."""
    q, k, v = x @ wq, x @ wk, x @ wv
    scores = (q @ tn.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(wq.shape[-1]))
    return tn.softmax_rows(scores) @ v


def multi_head_attention(x, p: EncoderBlockParams) -> Tensor:
    x = tn.as_tensor(x)
    H, d, dh = p.wq.shape
    if x.shape[-1] != d:
        raise DimensionError(f"attention input width {x.shape[-1]} != {d}")
    lead, T = x.shape[:-2], x.shape[-2]

    def project(w):
        # all heads in one product: d x (H*dh), then split to ... H T dh
        flat = tn.reshape(tn.swapaxes(w, 0, 1), (d, H * dh))
        return tn.swapaxes(tn.reshape(x @ flat, lead + (T, H, dh)), -3, -2)

    q, k, v = project(p.wq), project(p.wk), project(p.wv)
    scores = (q @ tn.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dh))
    heads = tn.softmax_rows(scores) @ v                      # ... H T dh
    concat = tn.reshape(tn.swapaxes(heads, -3, -2), lead + (T, H * dh))
    return concat @ p.wo


def feed_forward(x: Tensor, p: EncoderBlockParams) -> Tensor:
    return tn.relu(x @ p.w1 + p.b1) @ p.w2 + p.b2


def encoder_block(x, p: EncoderBlockParams, eps: float = LN_EPS) -> Tensor:
    """Pre-LN residual layer, ``LN(x + MHA(LN(x)))`` then ``LN(y + FFN(LN(y)))``."""
    x = tn.as_tensor(x)
    ln1 = lambda t: tn.layer_norm_feature(t, p.ln1_gain, p.ln1_bias, eps)  # noqa: E731
    ln2 = lambda t: tn.layer_norm_feature(t, p.ln2_gain, p.ln2_bias, eps)  # noqa: E731
    y = ln1(x + multi_head_attention(ln1(x), p))
    return ln2(y + feed_forward(ln2(y), p))


def encoder_stack(x, blocks: list[EncoderBlockParams], eps: float = LN_EPS) -> Tensor:
    out = tn.as_tensor(x)
    for p in blocks:
        out = encoder_block(out, p, eps)
    return out


def mean_pool_time(x) -> Tensor:
    """Average over the time axis: ``[..., T, d] -> [..., 1, d]``."""
    return tn.mean(x, axis=-2, keepdims=True)


def gradient_reversal(x, lam: float) -> Tensor:
    return tn.gradient_reversal(x, lam)


@dataclass
class MLPHead:
    """affine -> ReLU -> affine; with ``w1 is None`` it is a single affine map."""
    w1: Tensor | None
    b1: Tensor | None
    w2: Tensor
    b2: Tensor

    def named(self) -> dict[str, Tensor]:
        out = {}
        if self.w1 is not None:
            out["w1"], out["b1"] = self.w1, self.b1
        out["w2"], out["b2"] = self.w2, self.b2
        return out

    @property
    def d_in(self) -> int:
        return (self.w1 if self.w1 is not None else self.w2).shape[0]

    @property
    def d_out(self) -> int:
        return self.w2.shape[1]


def init_mlp_head(rng: np.random.Generator, d_in: int, hidden: int | None,
                  d_out: int) -> MLPHead:
    def w(a, b):
        return Tensor(rng.normal(0.0, 1.0 / np.sqrt(a), size=(a, b)), requires_grad=True)

    if hidden is None:
        return MLPHead(None, None, w(d_in, d_out), Tensor(np.zeros(d_out), requires_grad=True))
    return MLPHead(w(d_in, hidden), Tensor(np.zeros(hidden), requires_grad=True),
                   w(hidden, d_out), Tensor(np.zeros(d_out), requires_grad=True))


def mlp_hidden(x, head: MLPHead) -> Tensor:
    """The first affine + ReLU of ``head`` (identity when it has no hidden layer)."""
    x = tn.as_tensor(x)
    if head.w1 is None:
        return x
    if x.shape[-1] != head.w1.shape[0]:
        raise DimensionError(f"head input width {x.shape[-1]} != {head.w1.shape[0]}")
    return tn.relu(x @ head.w1 + head.b1)


def mlp_head(x, head: MLPHead) -> Tensor:
    h = mlp_hidden(x, head)
    if h.shape[-1] != head.w2.shape[0]:
        raise DimensionError(f"head input width {h.shape[-1]} != {head.w2.shape[0]}")
    return h @ head.w2 + head.b2
