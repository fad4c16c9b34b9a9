"""Network building blocks assembled from autodiff primitives.

All sequence tensors are batch-first: ``[batch, time, features]``.
"""

from __future__ import annotations

import math

import numpy as np

from cmlrain import autodiff as ad
from cmlrain.autodiff import Tensor
from cmlrain.errors import LengthMismatch, ShapeMismatch


def _expect_3d(x: Tensor, what: str) -> None:
    if x.ndim != 3:
        raise ShapeMismatch(f"{what} expects [batch, time, features], got {x.shape}")


def input_project(x, w: Tensor, b: Tensor) -> Tensor:
    """Affine map applied identically at every time step."""
    x = ad.as_tensor(x)
    _expect_3d(x, "input_project")
    if x.shape[-1] != w.shape[0]:
        raise ShapeMismatch(f"input has {x.shape[-1]} features, projection expects {w.shape[0]}")
    return x @ w + b


def add_positional(x: Tensor, pos: Tensor) -> Tensor:
    """X' = X + P, with P of shape [1, L, d] broadcast over the batch."""
    _expect_3d(x, "add_positional")
    if x.shape[1:] != pos.shape[1:]:
        raise LengthMismatch(f"sequence {x.shape[1:]} does not match positional matrix {pos.shape[1:]}")
    return x + pos


def multi_head_attention(
    x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor, n_heads: int, return_weights: bool = False
):
    """Unmasked scaled dot-product self-attention over all time steps.

    The per-head projections W_i^Q etc. are the column blocks of the
    ``[d_model, d_model]`` matrices, so head i reads columns
    ``i*d_k:(i+1)*d_k``.
    """
    _expect_3d(x, "multi_head_attention")
    B, L, d = x.shape
    if d % n_heads:
        raise ShapeMismatch(f"d_model {d} not divisible by {n_heads} heads")
    dk = d // n_heads

    def heads(t: Tensor) -> Tensor:
        return t.reshape(B, L, n_heads, dk).transpose(0, 2, 1, 3)

    q, k, v = heads(x @ wq), heads(x @ wk), heads(x @ wv)
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dk))
    weights = ad.softmax(scores, axis=-1)
    ctx = (weights @ v).transpose(0, 2, 1, 3).reshape(B, L, d)
    out = ctx @ wo
    return (out, weights) if return_weights else out


def feed_forward(x: Tensor, w1, b1, w2, b2, p: float, train: bool, rng) -> Tensor:
    hidden = ad.dropout(ad.relu(x @ w1 + b1), p, train, rng)
    return hidden @ w2 + b2


def encoder_layer(x: Tensor, params, prefix: str, n_heads: int, p: float = 0.0, train: bool = False, rng=None):
    """Post-norm Transformer block: LN(X + MHA(X)) followed by LN(. + FFN(.))."""
    g = lambda name: params[prefix + name]  # noqa: E731
    attn = multi_head_attention(x, g("wq"), g("wk"), g("wv"), g("wo"), n_heads)
    x = ad.layer_norm(x + ad.dropout(attn, p, train, rng), g("ln1.g"), g("ln1.b"))
    ff = feed_forward(x, g("ff1.w"), g("ff1.b"), g("ff2.w"), g("ff2.b"), p, train, rng)
    return ad.layer_norm(x + ad.dropout(ff, p, train, rng), g("ln2.g"), g("ln2.b"))


def gru_direction(
    x: Tensor, w_ih: Tensor, w_hh: Tensor, b_ih: Tensor, b_hh: Tensor, reverse: bool = False, fused: bool = True
):
    """Run one GRU over the sequence, returning every hidden state [B, L, H].

    Gate layout along the last axis is (reset, update, candidate):

        r = sigmoid(x W_ir + b_ir + h W_hr + b_hr)
        z = sigmoid(x W_iz + b_iz + h W_hz + b_hz)
        n = tanh(x W_in + b_in + r * (h W_hn + b_hn))
        h' = (1 - z) * n + z * h

    ``fused=False`` unrolls the cell into elementary ops (slow; kept as an
    independent reference for the fused scan).
    """
    _expect_3d(x, "gru")
    B, L, _ = x.shape
    H = w_hh.shape[0]
    if w_ih.shape != (x.shape[-1], 3 * H):
        raise ShapeMismatch(f"GRU input weights {w_ih.shape} do not fit input {x.shape}")
    xg = x @ w_ih + b_ih
    if fused:
        return ad.recurrent_scan(xg, w_hh, b_hh, "gru", reverse)
    h = Tensor(np.zeros((B, H)))
    outputs: list[Tensor] = [None] * L  # type: ignore[list-item]
    steps = range(L - 1, -1, -1) if reverse else range(L)
    for t in steps:
        xt = xg[:, t, :]
        hg = h @ w_hh + b_hh
        rz = ad.sigmoid(xt[:, : 2 * H] + hg[:, : 2 * H])
        r, z = rz[:, :H], rz[:, H:]
        n = ad.tanh(xt[:, 2 * H :] + r * hg[:, 2 * H :])
        h = n + z * (h - n)
        outputs[t] = h
    return ad.stack(outputs, axis=1)


def rnn_direction(
    x: Tensor, w_ih: Tensor, w_hh: Tensor, b_ih: Tensor, b_hh: Tensor, reverse: bool = False, fused: bool = True
):
    """Elman RNN: h' = tanh(x W_ih + b_ih + h W_hh + b_hh)."""
    _expect_3d(x, "rnn")
    B, L, _ = x.shape
    H = w_hh.shape[0]
    if w_ih.shape != (x.shape[-1], H):
        raise ShapeMismatch(f"RNN input weights {w_ih.shape} do not fit input {x.shape}")
    xg = x @ w_ih + b_ih
    if fused:
        return ad.recurrent_scan(xg, w_hh, b_hh, "rnn", reverse)
    h = Tensor(np.zeros((B, H)))
    outputs: list[Tensor] = [None] * L  # type: ignore[list-item]
    steps = range(L - 1, -1, -1) if reverse else range(L)
    for t in steps:
        h = ad.tanh(xg[:, t, :] + h @ w_hh + b_hh)
        outputs[t] = h
    return ad.stack(outputs, axis=1)


def bigru(x: Tensor, fwd: tuple, bwd: tuple) -> Tensor:
    """Y_t = [h_t ; h'_t]: forward pass left-to-right, backward pass right-to-left."""
    return ad.concat([gru_direction(x, *fwd), gru_direction(x, *bwd, reverse=True)], axis=-1)


def attention_pool(x: Tensor, w: Tensor, b: Tensor, return_weights: bool = False):
    """alpha = softmax_t(x_t . w + b); Z = sum_t alpha_t x_t."""
    _expect_3d(x, "attention_pool")
    if w.shape != (x.shape[-1], 1):
        raise ShapeMismatch(f"score weights {w.shape} do not fit features {x.shape[-1]}")
    alpha = ad.softmax(x @ w + b, axis=1)  # [B, L, 1]
    pooled = (x * alpha).sum(axis=1)
    return (pooled, alpha.reshape(x.shape[0], x.shape[1])) if return_weights else pooled
