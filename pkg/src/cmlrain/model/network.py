"""Forward pass for every model kind behind one interface."""

from __future__ import annotations

import numpy as np

from cmlrain import autodiff as ad
from cmlrain.autodiff import Tensor
from cmlrain.errors import SpecMismatch
from cmlrain.model import layers
from cmlrain.model.params import ModelParams
from cmlrain.model.spec import ModelSpec


def _recurrent_stack(h: Tensor, spec: ModelSpec, params: ModelParams) -> tuple[Tensor, list[Tensor]]:
    """Returns the last layer's concatenated outputs and its per-direction outputs."""
    run = layers.gru_direction if spec.cell == "gru" else layers.rnn_direction
    per_dir: list[Tensor] = []
    for layer in range(spec.gru_layers):
        per_dir = []
        for direction in ("fwd", "bwd")[: spec.directions]:
            p = f"rnn{layer}.{direction}."
            weights = (params[p + "w_ih"], params[p + "w_hh"], params[p + "b_ih"], params[p + "b_hh"])
            per_dir.append(run(h, *weights, reverse=direction == "bwd"))
        h = per_dir[0] if len(per_dir) == 1 else ad.concat(per_dir, axis=-1)
    return h, per_dir


def encode(spec: ModelSpec, params: ModelParams, x: Tensor, train: bool = False, rng=None) -> Tensor:
    """Input projection, positional encoding and the encoder stack."""
    h = layers.input_project(x, params["proj.w"], params["proj.b"])
    if not spec.uses_encoder:
        return h
    h = layers.add_positional(h, params["pos"])
    h = ad.dropout(h, spec.dropout, train, rng)
    for i in range(spec.n_encoder_layers):
        h = layers.encoder_layer(h, params, f"enc{i}.", spec.n_heads, spec.dropout, train, rng)
    return h


def forward(spec: ModelSpec, params: ModelParams, x, train: bool = False, rng: np.random.Generator | None = None):
    """Predict next-minute rain rate (mm/h, non-negative) for a batch of windows.

    ``x`` has shape ``[B, window_len, n_features]``; the result has shape ``[B]``.
    """
    if params.spec != spec:
        raise SpecMismatch("parameters were built for a different ModelSpec")
    x = ad.as_tensor(x)
    if x.ndim != 3 or x.shape[1:] != (spec.window_len, spec.n_features):
        raise SpecMismatch(f"expected input [B, {spec.window_len}, {spec.n_features}], got {x.shape}")
    if train and spec.dropout > 0 and rng is None:
        raise ValueError("training-mode forward with dropout needs an rng")

    h = encode(spec, params, x, train, rng)
    if spec.kind == "TabGRU":
        h, _ = _recurrent_stack(h, spec, params)
        z = layers.attention_pool(h, params["pool.w"], params["pool.b"])
    elif spec.kind == "BiGRU":
        _, (fwd, bwd) = _recurrent_stack(h, spec, params)
        z = ad.concat([fwd[:, -1, :], bwd[:, 0, :]], axis=-1)
    elif spec.cell is not None:
        h, _ = _recurrent_stack(h, spec, params)
        z = h[:, -1, :]
    else:
        z = h[:, -1, :]
    z = ad.dropout(z, spec.dropout, train, rng)
    out = ad.softplus(z @ params["head.w"] + params["head.b"])
    return out.reshape(x.shape[0])


def predict(params: ModelParams, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Inference-mode predictions as a plain array."""
    spec = params.spec
    chunks = []
    with ad.no_grad():
        for start in range(0, len(x), batch_size):
            chunks.append(forward(spec, params, x[start : start + batch_size], train=False).data)
    return np.concatenate(chunks) if chunks else np.zeros(0)
