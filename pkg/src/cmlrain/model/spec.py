from __future__ import annotations

from dataclasses import asdict, dataclass, fields

from cmlrain.errors import ConfigInvalid

KINDS = ("TabGRU", "RNN", "GRU", "BiGRU", "Transformer", "TransGRU")

# kinds that run the learnable positional encoding + Transformer encoder stack
ENCODER_KINDS = ("TabGRU", "Transformer", "TransGRU")
RECURRENT_KINDS = ("TabGRU", "RNN", "GRU", "BiGRU", "TransGRU")
BIDIRECTIONAL_KINDS = ("TabGRU", "BiGRU")


@dataclass(frozen=True)
class ModelSpec:
    """Declarative architecture description.

    Defaults follow the tuned configuration: 3 encoder layers, 4 heads,
    64 GRU units in one layer, dropout 0.3 and a 30-minute window.
    """

    kind: str = "TabGRU"
    d_model: int = 64
    n_heads: int = 4
    n_encoder_layers: int = 3
    gru_hidden: int = 64
    gru_layers: int = 1
    dropout: float = 0.3
    window_len: int = 30
    n_features: int = 10

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigInvalid(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        for name in ("d_model", "n_heads", "gru_hidden", "gru_layers", "window_len", "n_features"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigInvalid(f"{name} must be a positive integer, got {value!r}")
        if not isinstance(self.n_encoder_layers, int) or self.n_encoder_layers < 0:
            raise ConfigInvalid(f"n_encoder_layers must be a non-negative integer, got {self.n_encoder_layers!r}")
        if self.d_model % self.n_heads != 0:
            raise ConfigInvalid(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads}): "
                "each head uses d_k = d_v = d_model / n_heads"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigInvalid(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def ffn_dim(self) -> int:
        return 4 * self.d_model

    @property
    def uses_encoder(self) -> bool:
        return self.kind in ENCODER_KINDS

    @property
    def cell(self) -> str | None:
        if self.kind == "RNN":
            return "rnn"
        if self.kind in RECURRENT_KINDS:
            return "gru"
        return None

    @property
    def directions(self) -> int:
        return 2 if self.kind in BIDIRECTIONAL_KINDS else 1

    @property
    def readout_dim(self) -> int:
        if self.cell is None:
            return self.d_model
        return self.gru_hidden * self.directions

    def replace(self, **changes) -> "ModelSpec":
        data = self.to_dict()
        data.update(changes)
        return ModelSpec.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigInvalid(f"unknown ModelSpec fields: {sorted(unknown)}")
        return cls(**data)
