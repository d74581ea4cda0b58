"""Deterministic desk-scale training loop.

There is no forward pass. Gradients are synthesized from a counter-based
hash of (seed, step, global element id) plus a feedback term on the current
master value, so a run is a pure function of its seed and any state can be
resumed bit-exactly. The feedback term makes states of different provenance
diverge when trained further.
"""

from __future__ import annotations

import json
import logging
import math
import re
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import MissingModules, StorageError
from .model import DecayClass, ModelSpec
from .optim import (
    AdamHyperparams,
    GroupState,
    OptimState,
    ParameterGroupTable,
    apply_step,
    build_group_table,
    coarse_to_fine,
    fine_to_coarse,
)
from .store import (
    checkpoint_name,
    read_checkpoint,
    trainer_state_json,
    write_checkpoint,
)
from .strategies import StrategyConfig, modules_to_save

log = logging.getLogger(__name__)

LOG_FILE = "log.jsonl"
_MASK = (1 << 64) - 1
_CKPT_RE = re.compile(r"^checkpoint-(\d+)$")


def _mix64(x):
    """splitmix64 finalizer; works on Python ints and uint64 arrays alike."""
    if isinstance(x, np.ndarray):
        x = x ^ (x >> np.uint64(30))
        x = x * np.uint64(0xBF58476D1CE4E5B9)
        x = x ^ (x >> np.uint64(27))
        x = x * np.uint64(0x94D049BB133111EB)
        return x ^ (x >> np.uint64(31))
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9 & _MASK
    x = (x ^ (x >> 27)) * 0x94D049BB133111EB & _MASK
    return x ^ (x >> 31)


def counter_uniform(seed: int, step: int, ids: np.ndarray) -> np.ndarray:
    """Uniform float32 in [-1, 1) keyed by (seed, step, element id)."""
    key = _mix64((_mix64(seed & _MASK) + 0x9E3779B97F4A7C15 * (step + 1)) & _MASK)
    h = _mix64(ids.astype(np.uint64) + np.uint64(key))
    u = (h >> np.uint64(40)).astype(np.float64) * 2.0**-23 - 1.0
    return u.astype(np.float32)


@dataclass(frozen=True)
class GradientSource:
    seed: int
    c1: float = 0.05
    c2: float = 0.01


def element_ids(table: ParameterGroupTable, grouping: str = "fine") -> dict[int, np.ndarray]:
    """Global element id of every slot, per group of the given layout."""
    fine = {info.index: np.arange(info.global_offset, info.global_offset + info.element_count, dtype=np.int64)
            for info in table.groups}
    if grouping == "fine":
        return fine
    n0, n1 = table.coarse_lengths()
    out = {0: np.empty(n0, dtype=np.int64), 1: np.empty(n1, dtype=np.int64)}
    for g, (cg, off) in table.coarse_segments().items():
        out[cg][off:off + len(fine[g])] = fine[g]
    return out


def synth_grad(src: GradientSource, step: int, ids: dict[int, np.ndarray], state: OptimState) -> dict[int, np.ndarray]:
    c1 = np.float32(src.c1)
    c2 = np.float32(src.c2)
    grads = {}
    for g, s in state.groups.items():
        u = counter_uniform(src.seed, step, ids[g])
        grads[g] = c1 * s.master + c2 * u
    return grads


def init_state(spec: ModelSpec, hyper: AdamHyperparams, grouping: str = "fine") -> OptimState:
    """Fresh optimizer state: norms at 1.0, projections small and seeded."""
    table = build_group_table(spec)
    ids = element_ids(table, "fine")
    groups = {}
    for info in table.groups:
        if info.decay_class is DecayClass.NO_DECAY:
            master = np.ones(info.element_count, dtype=np.float32)
        else:
            master = np.float32(0.02) * counter_uniform(spec.seed, -1, ids[info.index])
        z = np.zeros(info.element_count, dtype=np.float32)
        groups[info.index] = GroupState(master, z, z.copy(), hyper.for_class(info.decay_class))
    state = OptimState(groups, 0)
    return fine_to_coarse(state, table) if grouping == "coarse" else state


def _norm(arrays) -> float:
    # f32 squares are exact in f64 and fsum is correctly rounded, so the
    # result does not depend on how elements are grouped
    return math.sqrt(math.fsum(x for a in arrays for x in np.square(a.astype(np.float64)).tolist()))


class Trainer:
    """Runs AdamW steps on synthetic gradients and writes periodic checkpoints."""

    def __init__(self, spec: ModelSpec, cfg: StrategyConfig, num_ranks: int = 2,
                 hyper: AdamHyperparams | None = None, grouping: str = "fine",
                 state: OptimState | None = None, step: int = 0, grad: GradientSource | None = None):
        if grouping not in ("fine", "coarse"):
            raise ValueError(f"grouping must be 'fine' or 'coarse', got {grouping!r}")
        cfg.validate_for(spec)
        self.spec = spec
        self.cfg = cfg
        self.num_ranks = num_ranks
        self.hyper = hyper or AdamHyperparams()
        self.grouping = grouping
        self.table = build_group_table(spec)
        self.grad = grad or GradientSource(spec.seed)
        self.ids = element_ids(self.table, grouping)
        if state is None:
            state = init_state(spec, self.hyper, grouping)
        elif grouping == "coarse" and len(state.groups) != 2:
            state = fine_to_coarse(state, self.table)
        self.state = state
        self.step = step

    def fine_state(self) -> OptimState:
        if self.grouping == "coarse":
            return coarse_to_fine(self.state, self.table)
        return self.state

    def train_step(self) -> dict:
        self.step += 1
        grads = synth_grad(self.grad, self.step, self.ids, self.state)
        new = apply_step(self.state, grads)
        keys = sorted(new.groups)
        record = {
            "grad_norm": _norm(grads[g] for g in keys),
            "step": self.step,
            "update_norm": _norm(new.groups[g].master - self.state.groups[g].master for g in keys),
        }
        self.state = new
        return record

    def save(self, run_dir: Path) -> Path | None:
        if self.step % self.cfg.interval:
            return None
        counter = self.step // self.cfg.interval
        modules = modules_to_save(self.cfg, self.spec, counter)
        fine = self.fine_state()
        groups = self.table.groups_for_modules(modules)
        subset = OptimState({g: fine.groups[g] for g in groups}, fine.t)
        ts = trainer_state_json(self.step, self.hyper.lr, fine.t, self.cfg.kind, counter, self.grad.seed)
        path = Path(run_dir) / checkpoint_name(self.step)
        return write_checkpoint(path, self.spec, self.step, modules, subset, self.num_ranks, ts,
                                self.cfg.kind, grouping=self.grouping)

    def run(self, steps: int, run_dir=None, on_step: Callable[[Trainer], None] | None = None) -> OptimState:
        logf = None
        if run_dir is not None:
            run_dir = Path(run_dir)
            run_dir.mkdir(parents=True, exist_ok=True)
            logf = open(run_dir / LOG_FILE, "a", encoding="utf-8")
        try:
            for _ in range(steps):
                record = self.train_step()
                if logf is not None:
                    logf.write(json.dumps(record, sort_keys=True) + "\n")
                    self.save(run_dir)
                if on_step is not None:
                    on_step(self)
        except OSError as exc:
            raise StorageError(f"training run I/O failed: {exc}") from exc
        finally:
            if logf is not None:
                logf.close()
        return self.fine_state()


@dataclass
class TrainResult:
    run_dir: Path | None
    step: int
    state: OptimState
    spec: ModelSpec


def train(spec: ModelSpec, cfg: StrategyConfig, total_steps: int, out_dir, num_ranks: int = 2,
          hyper: AdamHyperparams | None = None, grouping: str = "fine",
          grad: GradientSource | None = None) -> TrainResult:
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()):
        raise StorageError(f"run directory {out_dir} is not empty")
    trainer = Trainer(spec, cfg, num_ranks, hyper, grouping, grad=grad)
    state = trainer.run(total_steps, out_dir)
    log.info("trained %d steps into %s", total_steps, out_dir)
    return TrainResult(out_dir, trainer.step, state, spec)


def trainer_from_checkpoint(ckpt_dir, cfg: StrategyConfig | None = None,
                            grad: GradientSource | None = None) -> Trainer:
    ckpt = read_checkpoint(ckpt_dir)
    if not ckpt.meta.is_complete:
        raise MissingModules(ckpt.meta.missing_modules, ckpt.meta.path)
    ts = ckpt.meta.trainer_state
    first = ckpt.optim.groups[0].hyper
    hyper = AdamHyperparams(float(ts["lr"]), first.beta1, first.beta2, first.eps,
                            max(h.weight_decay for h in ckpt.meta.hypers.values()))
    if cfg is None:
        cfg = StrategyConfig(kind=ts["strategy"] if ts["strategy"] in ("full", "parity", "filter") else "full")
    grad = grad or GradientSource(int(ts["rng_seed"]))
    return Trainer(ckpt.spec, cfg, ckpt.meta.num_ranks, hyper, "fine", ckpt.optim, int(ts["step"]), grad)


def resume(ckpt_dir, additional_steps: int, out_dir=None, cfg: StrategyConfig | None = None,
           grad: GradientSource | None = None) -> TrainResult:
    """Continue training from a complete checkpoint.

    Masters, moments, ``t`` and step come from the checkpoint. When
    ``out_dir`` is given the continuation logs and checkpoints there.
    """
    trainer = trainer_from_checkpoint(ckpt_dir, cfg, grad)
    state = trainer.run(additional_steps, out_dir)
    return TrainResult(Path(out_dir) if out_dir is not None else None, trainer.step, state, trainer.spec)


def list_checkpoints(run_dir) -> list[tuple[int, Path]]:
    out = []
    for p in Path(run_dir).iterdir():
        m = _CKPT_RE.match(p.name)
        if m and p.is_dir():
            out.append((int(m.group(1)), p))
    return sorted(out)


def inject_failure(run_dir, at_step: int) -> list[Path]:
    """Make ``run_dir`` look as if the process died at ``at_step``.

    A checkpoint scheduled exactly at ``at_step`` survives.
    """
    run_dir = Path(run_dir)
    kept = []
    for step, path in list_checkpoints(run_dir):
        if step > at_step:
            shutil.rmtree(path)
        else:
            kept.append(path)
    for stale in run_dir.glob("*.partial"):
        shutil.rmtree(stale)
    logp = run_dir / LOG_FILE
    if logp.exists():
        lines = [ln for ln in logp.read_text(encoding="utf-8").splitlines() if json.loads(ln)["step"] <= at_step]
        logp.write_text("".join(ln + "\n" for ln in lines), encoding="utf-8")
    return kept

