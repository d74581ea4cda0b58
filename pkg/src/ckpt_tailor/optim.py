"""Layer-aligned AdamW parameter groups.

A conventional mixed-precision setup flattens every parameter into two
groups, split by weight decay. Those flat buffers cannot be cut along layer
boundaries, so here each transformer layer gets two groups of its own (its
no-decay norms and its decayed projections) and each auxiliary module gets
one, giving ``2L + 3`` groups (``2L + 2`` when the embedding is tied).

Fine group order (0-based)::

    0               norm
    1 .. L          no-decay segment of layer i at 1 + i
    L + 1           embed_tokens
    L + 2           lm_head (untied only)
    rest            decay segment of layer i

Because the update is elementwise, regrouping never changes the numbers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from .errors import GeometryError, InvalidModule, NonFiniteError
from .model import (
    EMBED,
    LM_HEAD,
    NORM,
    DecayClass,
    ModelSpec,
    ModuleId,
    ModuleKind,
    TensorDecl,
    enumerate_modules,
    tensors_of,
)


@dataclass(frozen=True)
class AdamHyperparams:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError(f"betas must lie in [0, 1): {self.beta1}, {self.beta2}")
        if not self.eps > 0 or not self.lr > 0 or not self.weight_decay >= 0:
            raise ValueError(f"invalid hyperparameters {self}")

    def to_dict(self) -> dict:
        return {
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "weight_decay": self.weight_decay,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> AdamHyperparams:
        return cls(**{k: float(d[k]) for k in ("lr", "beta1", "beta2", "eps", "weight_decay")})

    def for_class(self, decay_class: DecayClass) -> AdamHyperparams:
        if decay_class is DecayClass.NO_DECAY:
            return replace(self, weight_decay=0.0)
        return self


@dataclass
class GroupState:
    master: np.ndarray
    exp_avg: np.ndarray
    exp_avg_sq: np.ndarray
    hyper: AdamHyperparams

    def __post_init__(self):
        for name in ("master", "exp_avg", "exp_avg_sq"):
            arr = getattr(self, name)
            if arr.dtype != np.float32 or arr.ndim != 1:
                raise GeometryError(f"{name} must be a 1-d float32 vector")
        if not len(self.master) == len(self.exp_avg) == len(self.exp_avg_sq):
            raise GeometryError("master/exp_avg/exp_avg_sq lengths differ")

    @property
    def true_length(self) -> int:
        return len(self.master)

    @classmethod
    def zeros(cls, n: int, hyper: AdamHyperparams) -> GroupState:
        z = np.zeros(n, dtype=np.float32)
        return cls(z, z.copy(), z.copy(), hyper)

    def copy(self) -> GroupState:
        return GroupState(self.master.copy(), self.exp_avg.copy(), self.exp_avg_sq.copy(), self.hyper)

    def bitwise_equal(self, other: GroupState) -> bool:
        return (
            self.hyper == other.hyper
            and _same_bits(self.master, other.master)
            and _same_bits(self.exp_avg, other.exp_avg)
            and _same_bits(self.exp_avg_sq, other.exp_avg_sq)
        )


def _same_bits(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and a.tobytes() == b.tobytes()


@dataclass
class OptimState:
    """Optimizer state keyed by group index, plus the shared step counter ``t``."""

    groups: dict[int, GroupState]
    t: int = 0

    def copy(self) -> OptimState:
        return OptimState({g: s.copy() for g, s in self.groups.items()}, self.t)

    def bitwise_equal(self, other: OptimState) -> bool:
        return (
            self.t == other.t
            and self.groups.keys() == other.groups.keys()
            and all(s.bitwise_equal(other.groups[g]) for g, s in self.groups.items())
        )


@dataclass(frozen=True)
class GroupInfo:
    index: int
    owner: ModuleId
    decay_class: DecayClass
    element_count: int
    tensors: tuple[TensorDecl, ...]
    # offset of this group's first element in the canonical flattening
    global_offset: int


@dataclass(frozen=True)
class ParameterGroupTable:
    spec: ModelSpec
    groups: tuple[GroupInfo, ...]
    _by_owner: dict = field(repr=False, compare=False)

    @property
    def num_layers(self) -> int:
        return self.spec.num_layers

    @property
    def weight_tied(self) -> bool:
        return self.spec.weight_tied

    def __len__(self):
        return len(self.groups)

    def __getitem__(self, g: int) -> GroupInfo:
        return self.groups[g]

    def indices_for(self, m: ModuleId) -> tuple[int, ...]:
        return group_indices_for(self, m)

    def groups_for_modules(self, modules) -> list[int]:
        return sorted(g for m in modules for g in group_indices_for(self, m))

    def coarse_segments(self) -> dict[int, tuple[int, int]]:
        """Fine group -> (coarse group, offset), coarse 0 = no-decay, 1 = decay.

        Coarse groups concatenate segments in module order, which is the
        layout a stock two-group optimizer produces.
        """
        offsets = [0, 0]
        out = {}
        for m in enumerate_modules(self.spec):
            for g in self._by_owner[m]:
                cg = 0 if self.groups[g].decay_class is DecayClass.NO_DECAY else 1
                out[g] = (cg, offsets[cg])
                offsets[cg] += self.groups[g].element_count
        return out

    def coarse_lengths(self) -> tuple[int, int]:
        lengths = [0, 0]
        for info in self.groups:
            lengths[0 if info.decay_class is DecayClass.NO_DECAY else 1] += info.element_count
        return lengths[0], lengths[1]

    def tensor_locations(self) -> dict[str, tuple[int, int, TensorDecl]]:
        """Tensor name -> (group index, offset inside group, declaration)."""
        out = {}
        for info in self.groups:
            off = 0
            for decl in info.tensors:
                out[decl.name] = (info.index, off, decl)
                off += decl.numel
        return out


def build_group_table(spec: ModelSpec) -> ParameterGroupTable:
    L = spec.num_layers
    # canonical flattening offsets, module order then declaration order
    global_off = {}
    pos = 0
    for m in enumerate_modules(spec):
        for decl in tensors_of(spec, m):
            global_off[decl.name] = pos
            pos += decl.numel

    def segment(m: ModuleId, cls: DecayClass):
        decls = tuple(d for d in tensors_of(spec, m) if d.decay_class is cls)
        return decls, global_off[decls[0].name]

    order: list[tuple[ModuleId, DecayClass]] = [(NORM, DecayClass.NO_DECAY)]
    order += [(ModuleId.layer(i), DecayClass.NO_DECAY) for i in range(L)]
    order.append((EMBED, DecayClass.DECAY))
    if not spec.weight_tied:
        order.append((LM_HEAD, DecayClass.DECAY))
    order += [(ModuleId.layer(i), DecayClass.DECAY) for i in range(L)]

    groups = []
    by_owner: dict[ModuleId, list[int]] = {}
    for g, (m, cls) in enumerate(order):
        decls, off = segment(m, cls)
        groups.append(GroupInfo(g, m, cls, sum(d.numel for d in decls), decls, off))
        by_owner.setdefault(m, []).append(g)
    return ParameterGroupTable(spec, tuple(groups), {m: tuple(v) for m, v in by_owner.items()})


def group_indices_for(table: ParameterGroupTable, m: ModuleId) -> tuple[int, ...]:
    """One index for an auxiliary module, (no-decay, decay) for a layer."""
    L = table.num_layers
    if m.kind is ModuleKind.LM_HEAD and table.weight_tied:
        raise InvalidModule("lm_head has no group on a weight-tied model")
    if m.is_layer:
        if not 0 <= m.index < L:
            raise InvalidModule(f"{m} out of range for {L} layers")
        decay_base = L + 2 if table.weight_tied else L + 3
        return (1 + m.index, decay_base + m.index)
    if m.kind is ModuleKind.NORM:
        return (0,)
    if m.kind is ModuleKind.EMBED_TOKENS:
        return (L + 1,)
    return (L + 2,)


def init_coarse_state(table: ParameterGroupTable, hyper: AdamHyperparams, masters=None) -> OptimState:
    n0, n1 = table.coarse_lengths()
    state = OptimState(
        {
            0: GroupState.zeros(n0, hyper.for_class(DecayClass.NO_DECAY)),
            1: GroupState.zeros(n1, hyper.for_class(DecayClass.DECAY)),
        },
        0,
    )
    if masters is not None:
        state.groups[0].master[:] = masters[0]
        state.groups[1].master[:] = masters[1]
    return state


def coarse_to_fine(coarse: OptimState, table: ParameterGroupTable) -> OptimState:
    n0, n1 = table.coarse_lengths()
    if set(coarse.groups) != {0, 1}:
        raise GeometryError("coarse state must have exactly groups 0 and 1")
    if coarse.groups[0].true_length != n0 or coarse.groups[1].true_length != n1:
        raise GeometryError(
            f"coarse lengths {coarse.groups[0].true_length}/{coarse.groups[1].true_length} "
            f"do not match table ({n0}/{n1})"
        )
    fine = {}
    for g, (cg, off) in table.coarse_segments().items():
        src = coarse.groups[cg]
        n = table[g].element_count
        sl = slice(off, off + n)
        fine[g] = GroupState(
            src.master[sl].copy(), src.exp_avg[sl].copy(), src.exp_avg_sq[sl].copy(), src.hyper
        )
    return OptimState(dict(sorted(fine.items())), coarse.t)


def fine_to_coarse(fine: OptimState, table: ParameterGroupTable) -> OptimState:
    if set(fine.groups) != set(range(len(table))):
        raise GeometryError("fine state must cover every group of the table")
    n0, n1 = table.coarse_lengths()
    hyper = {}
    bufs = {cg: [np.zeros(n, dtype=np.float32) for _ in range(3)] for cg, n in ((0, n0), (1, n1))}
    for g, (cg, off) in table.coarse_segments().items():
        s = fine.groups[g]
        if s.true_length != table[g].element_count:
            raise GeometryError(f"group {g} has length {s.true_length}, expected {table[g].element_count}")
        for buf, arr in zip(bufs[cg], (s.master, s.exp_avg, s.exp_avg_sq)):
            buf[off:off + s.true_length] = arr
        hyper.setdefault(cg, s.hyper)
    return OptimState({cg: GroupState(*bufs[cg], hyper[cg]) for cg in (0, 1)}, fine.t)


def _f32(x: float) -> np.float32:
    return np.float32(x)


def apply_step(state: OptimState, grads: Mapping[int, np.ndarray]) -> OptimState:
    """One AdamW step with bias correction and decoupled weight decay.

    Scalar coefficients are computed in float64 and rounded once to float32;
    all vector arithmetic is float32 and strictly elementwise, so the result
    does not depend on how elements are grouped.
    """
    if set(grads) != set(state.groups):
        raise GeometryError(f"gradient groups {sorted(grads)} != state groups {sorted(state.groups)}")
    t = state.t + 1
    out = {}
    for g, s in state.groups.items():
        grad = grads[g]
        if grad.dtype != np.float32 or grad.shape != s.master.shape:
            raise GeometryError(f"gradient for group {g} has shape {grad.shape}, expected {s.master.shape}")
        if not np.isfinite(grad).all():
            raise NonFiniteError(f"non-finite gradient in group {g}")
        h = s.hyper
        bc1 = 1.0 - h.beta1 ** t
        bc2 = 1.0 - h.beta2 ** t
        b1, one_m_b1 = _f32(h.beta1), _f32(1.0 - h.beta1)
        b2, one_m_b2 = _f32(h.beta2), _f32(1.0 - h.beta2)
        step_size = _f32(h.lr / bc1)
        inv_sqrt_bc2 = _f32(1.0 / math.sqrt(bc2))
        decay = _f32(1.0 - h.lr * h.weight_decay)
        eps = _f32(h.eps)

        m = b1 * s.exp_avg + one_m_b1 * grad
        v = b2 * s.exp_avg_sq + one_m_b2 * (grad * grad)
        denom = np.sqrt(v) * inv_sqrt_bc2 + eps
        w = s.master * decay - step_size * (m / denom)
        out[g] = GroupState(w, m, v, h)
    return OptimState(out, t)
