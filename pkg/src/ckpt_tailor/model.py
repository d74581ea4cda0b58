"""Layer-wise description of the toy decoder model.

The model is only a named, shaped parameter set: an embedding, ``L``
transformer layers, a final norm and an optional (untied) output head.
Everything else in the package relies on the canonical ordering defined here.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import cached_property

from .errors import GeometryError, InvalidModule


class ModuleKind(enum.Enum):
    EMBED_TOKENS = "embed_tokens"
    LAYER = "layers"
    NORM = "norm"
    LM_HEAD = "lm_head"


class DecayClass(enum.Enum):
    DECAY = "decay"
    NO_DECAY = "no_decay"


@dataclass(frozen=True, order=False)
class ModuleId:
    kind: ModuleKind
    index: int | None = None

    def __post_init__(self):
        if (self.kind is ModuleKind.LAYER) != (self.index is not None):
            raise InvalidModule(f"bad module id {self.kind} / {self.index}")
        if self.index is not None and self.index < 0:
            raise InvalidModule(f"negative layer index {self.index}")

    @classmethod
    def layer(cls, i: int) -> ModuleId:
        return cls(ModuleKind.LAYER, int(i))

    @classmethod
    def parse(cls, name: str) -> ModuleId:
        if name.startswith("layers."):
            idx = name[len("layers."):]
            if not idx.isdigit():
                raise InvalidModule(f"bad module name {name!r}")
            return cls.layer(int(idx))
        try:
            kind = ModuleKind(name)
        except ValueError:
            raise InvalidModule(f"bad module name {name!r}") from None
        if kind is ModuleKind.LAYER:
            raise InvalidModule(f"bad module name {name!r}")
        return cls(kind)

    @property
    def name(self) -> str:
        if self.kind is ModuleKind.LAYER:
            return f"layers.{self.index}"
        return self.kind.value

    @property
    def is_layer(self) -> bool:
        return self.kind is ModuleKind.LAYER

    def __str__(self):
        return self.name


EMBED = ModuleId(ModuleKind.EMBED_TOKENS)
NORM = ModuleId(ModuleKind.NORM)
LM_HEAD = ModuleId(ModuleKind.LM_HEAD)


@dataclass(frozen=True)
class TensorDecl:
    name: str
    shape: tuple[int, ...]
    decay_class: DecayClass

    @property
    def numel(self) -> int:
        return math.prod(self.shape)


# (suffix, shape-builder, decay) in canonical declaration order
_LAYER_TENSORS = (
    ("input_layernorm.weight", lambda s: (s.hidden_dim,), DecayClass.NO_DECAY),
    ("post_attention_layernorm.weight", lambda s: (s.hidden_dim,), DecayClass.NO_DECAY),
    ("attn.q_proj.weight", lambda s: (s.hidden_dim, s.hidden_dim), DecayClass.DECAY),
    ("attn.k_proj.weight", lambda s: (s.hidden_dim, s.hidden_dim), DecayClass.DECAY),
    ("attn.v_proj.weight", lambda s: (s.hidden_dim, s.hidden_dim), DecayClass.DECAY),
    ("attn.o_proj.weight", lambda s: (s.hidden_dim, s.hidden_dim), DecayClass.DECAY),
    ("mlp.gate_proj.weight", lambda s: (s.ffn_dim, s.hidden_dim), DecayClass.DECAY),
    ("mlp.up_proj.weight", lambda s: (s.ffn_dim, s.hidden_dim), DecayClass.DECAY),
    ("mlp.down_proj.weight", lambda s: (s.hidden_dim, s.ffn_dim), DecayClass.DECAY),
)

CONFIG_KEYS = ("num_layers", "hidden_dim", "ffn_dim", "vocab_size", "weight_tied", "seed")


@dataclass(frozen=True)
class ModelSpec:
    num_layers: int
    hidden_dim: int = 8
    ffn_dim: int = 16
    vocab_size: int = 32
    weight_tied: bool = False
    seed: int = 0

    def __post_init__(self):
        for key in ("num_layers", "hidden_dim", "ffn_dim", "vocab_size"):
            value = getattr(self, key)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise GeometryError(f"{key} must be a positive integer, got {value!r}")
        if not isinstance(self.weight_tied, bool):
            raise GeometryError(f"weight_tied must be a boolean, got {self.weight_tied!r}")
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            raise GeometryError(f"seed must be a 64-bit unsigned integer, got {self.seed!r}")

    @property
    def module_count(self) -> int:
        return self.num_layers + (2 if self.weight_tied else 3)

    def to_config(self) -> dict:
        return {key: getattr(self, key) for key in CONFIG_KEYS}

    @classmethod
    def from_config(cls, cfg: dict) -> ModelSpec:
        keys = set(cfg)
        if keys != set(CONFIG_KEYS):
            extra = sorted(keys - set(CONFIG_KEYS))
            missing = sorted(set(CONFIG_KEYS) - keys)
            raise GeometryError(f"config keys mismatch: missing={missing} unexpected={extra}")
        return cls(**{key: cfg[key] for key in CONFIG_KEYS})

    def same_geometry(self, other: ModelSpec) -> bool:
        """Shapes and tying agree (the seed may differ between runs)."""
        return (
            self.num_layers == other.num_layers
            and self.hidden_dim == other.hidden_dim
            and self.ffn_dim == other.ffn_dim
            and self.vocab_size == other.vocab_size
            and self.weight_tied == other.weight_tied
        )

    @cached_property
    def modules(self) -> tuple[ModuleId, ...]:
        return tuple(enumerate_modules(self))

    @cached_property
    def param_count(self) -> int:
        return sum(t.numel for m in self.modules for t in tensors_of(self, m))

    def check_module(self, m: ModuleId) -> None:
        if m.kind is ModuleKind.LM_HEAD and self.weight_tied:
            raise InvalidModule("lm_head does not exist on a weight-tied model")
        if m.is_layer and m.index >= self.num_layers:
            raise InvalidModule(f"{m} out of range for {self.num_layers} layers")


def enumerate_modules(spec: ModelSpec) -> list[ModuleId]:
    """Embedding, layers 0..L-1, final norm, then lm_head when untied."""
    mods = [EMBED]
    mods.extend(ModuleId.layer(i) for i in range(spec.num_layers))
    mods.append(NORM)
    if not spec.weight_tied:
        mods.append(LM_HEAD)
    return mods


def tensors_of(spec: ModelSpec, m: ModuleId) -> list[TensorDecl]:
    spec.check_module(m)
    if m.is_layer:
        return [
            TensorDecl(f"layers.{m.index}.{suffix}", shape(spec), decay)
            for suffix, shape, decay in _LAYER_TENSORS
        ]
    if m.kind is ModuleKind.NORM:
        return [TensorDecl("norm.weight", (spec.hidden_dim,), DecayClass.NO_DECAY)]
    if m.kind is ModuleKind.EMBED_TOKENS:
        return [TensorDecl("embed_tokens.weight", (spec.vocab_size, spec.hidden_dim), DecayClass.DECAY)]
    return [TensorDecl("lm_head.weight", (spec.vocab_size, spec.hidden_dim), DecayClass.DECAY)]


def module_of_tensor(name: str) -> ModuleId:
    head = name.split(".")
    if head[0] == "layers":
        return ModuleId.layer(int(head[1]))
    return ModuleId.parse(head[0])


def rename_tensor(name: str, target: ModuleId) -> str:
    """Re-home a layer tensor name onto another layer index."""
    parts = name.split(".")
    if parts[0] != "layers" or not target.is_layer:
        return name
    parts[1] = str(target.index)
    return ".".join(parts)
