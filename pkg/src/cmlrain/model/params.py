"""Parameter layout, initialisation and checkpoint I/O."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from cmlrain.autodiff import Tensor, load_tensors, save_tensors
from cmlrain.errors import DataError, SpecMismatch
from cmlrain.model.spec import ModelSpec

CHECKPOINT_FORMAT = "cmlrain-checkpoint/1"


def param_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every trainable tensor, in a fixed order."""
    d, F, L, H = spec.d_model, spec.n_features, spec.window_len, spec.gru_hidden
    shapes: dict[str, tuple[int, ...]] = {"proj.w": (F, d), "proj.b": (d,)}
    if spec.uses_encoder:
        shapes["pos"] = (1, L, d)
        for i in range(spec.n_encoder_layers):
            p = f"enc{i}."
            for w in ("wq", "wk", "wv", "wo"):
                shapes[p + w] = (d, d)
            shapes[p + "ln1.g"] = (d,)
            shapes[p + "ln1.b"] = (d,)
            shapes[p + "ff1.w"] = (d, spec.ffn_dim)
            shapes[p + "ff1.b"] = (spec.ffn_dim,)
            shapes[p + "ff2.w"] = (spec.ffn_dim, d)
            shapes[p + "ff2.b"] = (d,)
            shapes[p + "ln2.g"] = (d,)
            shapes[p + "ln2.b"] = (d,)
    if spec.cell is not None:
        gates = 3 if spec.cell == "gru" else 1
        in_dim = d
        for layer in range(spec.gru_layers):
            for direction in ("fwd", "bwd")[: spec.directions]:
                p = f"rnn{layer}.{direction}."
                shapes[p + "w_ih"] = (in_dim, gates * H)
                shapes[p + "w_hh"] = (H, gates * H)
                shapes[p + "b_ih"] = (gates * H,)
                shapes[p + "b_hh"] = (gates * H,)
            in_dim = H * spec.directions
    if spec.kind == "TabGRU":
        shapes["pool.w"] = (spec.readout_dim, 1)
        shapes["pool.b"] = (1,)
    shapes["head.w"] = (spec.readout_dim, 1)
    shapes["head.b"] = (1,)
    return shapes


def param_count(spec: ModelSpec) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(spec).values())


def _fan_in(name: str, shape: tuple[int, ...], spec: ModelSpec) -> int:
    if name.endswith("w_hh") or name.endswith("b_hh") or name.endswith("b_ih"):
        return spec.gru_hidden
    if len(shape) == 2:
        return shape[0]
    # biases follow the matrix they belong to
    partner = name[: -len(".b")] + ".w"
    return param_shapes(spec)[partner][0]


class ModelParams:
    """Named parameter tensors tied to a ModelSpec."""

    def __init__(self, spec: ModelSpec, tensors: dict[str, Tensor]):
        expected = param_shapes(spec)
        if list(tensors) != list(expected):
            missing = sorted(set(expected) - set(tensors))
            extra = sorted(set(tensors) - set(expected))
            if missing or extra:
                raise SpecMismatch(f"parameter names differ from spec: missing={missing}, extra={extra}")
            tensors = {k: tensors[k] for k in expected}
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise SpecMismatch(f"{name}: shape {tensors[name].shape} does not match spec {shape}")
        self.spec = spec
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.tensors.values())

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.tensors.items()}

    def load_snapshot(self, snap: dict[str, np.ndarray]) -> None:
        for k, arr in snap.items():
            self.tensors[k].data[...] = arr

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.spec, {k: Tensor(t.data.copy(), requires_grad=True, name=k) for k, t in self.tensors.items()}
        )


def init_params(spec: ModelSpec, rng: np.random.Generator) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero positional matrix."""
    tensors: dict[str, Tensor] = {}
    for name, shape in param_shapes(spec).items():
        if name == "pos":
            data = np.zeros(shape)
        elif name.endswith(".g"):
            data = np.ones(shape)
        elif name.endswith("ln1.b") or name.endswith("ln2.b"):
            data = np.zeros(shape)
        else:
            bound = math.sqrt(1.0 / _fan_in(name, shape, spec))
            data = rng.uniform(-bound, bound, size=shape)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    return ModelParams(spec, tensors)


def save_checkpoint(path, params: ModelParams, extra: dict | None = None) -> None:
    meta = {"format": CHECKPOINT_FORMAT, "model_spec": params.spec.to_dict()}
    if extra:
        meta["extra"] = extra
    save_tensors(path, {k: t.data for k, t in params.items()}, meta)


def load_checkpoint(path) -> ModelParams:
    arrays, meta = load_tensors(path)
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path}: not a model checkpoint")
    spec = ModelSpec.from_dict(meta["model_spec"])
    tensors = {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}
    return ModelParams(spec, tensors)
