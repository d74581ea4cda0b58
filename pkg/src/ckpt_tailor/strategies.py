"""Which modules a partial checkpoint saves.

``full``    every module, every time.
``parity``  alternating disjoint halves: odd counters save the even layers
            plus lm_head and norm, even counters save the odd layers plus
            embed_tokens. Any two consecutive checkpoints cover the model.
``filter``  the first and last ``head_count``/``tail_count`` layers plus norm
            on every checkpoint; every ``sparse_multiple``-th checkpoint also
            saves half of the middle layers, lower half with embed_tokens and
            upper half with lm_head, alternating.
"""

from __future__ import annotations

from dataclasses import dataclass

from .model import EMBED, LM_HEAD, NORM, ModelSpec, ModuleId, enumerate_modules
from .optim import AdamHyperparams
from .store import checkpoint_nbytes, trainer_state_json

KINDS = ("full", "parity", "filter")


@dataclass(frozen=True)
class StrategyConfig:
    kind: str = "full"
    interval: int = 10
    head_count: int = 2
    tail_count: int = 2
    sparse_multiple: int = 5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown strategy {self.kind!r}; expected one of {', '.join(KINDS)}")
        if self.interval < 1:
            raise ValueError(f"interval must be >= 1, got {self.interval}")
        if self.head_count < 0 or self.tail_count < 0 or self.sparse_multiple < 1:
            raise ValueError("filter parameters must be non-negative (sparse_multiple >= 1)")

    def validate_for(self, spec: ModelSpec) -> None:
        if self.kind == "filter" and self.head_count + self.tail_count > spec.num_layers:
            raise ValueError(
                f"head_count + tail_count = {self.head_count + self.tail_count} exceeds {spec.num_layers} layers"
            )


def _middle_halves(spec: ModelSpec, cfg: StrategyConfig) -> tuple[list[int], list[int]]:
    L = spec.num_layers
    middle = list(range(cfg.head_count, L - cfg.tail_count))
    cut = (len(middle) + 1) // 2
    return middle[:cut], middle[cut:]


def modules_to_save(cfg: StrategyConfig, spec: ModelSpec, counter: int) -> list[ModuleId]:
    """Modules saved at checkpoint number ``counter`` (1-based), canonical order."""
    if counter < 1:
        raise ValueError(f"checkpoint counter starts at 1, got {counter}")
    cfg.validate_for(spec)
    L = spec.num_layers
    if cfg.kind == "full":
        return enumerate_modules(spec)

    chosen: set[ModuleId] = set()
    if cfg.kind == "parity":
        if counter % 2 == 1:
            chosen.update(ModuleId.layer(i) for i in range(0, L, 2))
            chosen.add(NORM)
            if not spec.weight_tied:
                chosen.add(LM_HEAD)
        else:
            chosen.update(ModuleId.layer(i) for i in range(1, L, 2))
            chosen.add(EMBED)
    else:
        chosen.update(ModuleId.layer(i) for i in range(min(cfg.head_count, L)))
        chosen.update(ModuleId.layer(i) for i in range(max(L - cfg.tail_count, 0), L))
        chosen.add(NORM)
        if counter % cfg.sparse_multiple == 0:
            lower, upper = _middle_halves(spec, cfg)
            # first sparse checkpoint takes the lower half
            if (counter // cfg.sparse_multiple - 1) % 2 == 0:
                chosen.update(ModuleId.layer(i) for i in lower)
                chosen.add(EMBED)
            else:
                chosen.update(ModuleId.layer(i) for i in upper)
                if not spec.weight_tied:
                    chosen.add(LM_HEAD)
    return [m for m in enumerate_modules(spec) if m in chosen]


def expected_checkpoint_bytes(cfg: StrategyConfig, spec: ModelSpec, counter: int, num_ranks: int,
                              hyper: AdamHyperparams | None = None, grouping: str = "fine") -> int:
    hyper = hyper or AdamHyperparams()
    step = counter * cfg.interval
    state = trainer_state_json(step, hyper.lr, step, cfg.kind, counter, spec.seed)
    sizes = checkpoint_nbytes(spec, modules_to_save(cfg, spec, counter), num_ranks, step, state, cfg.kind,
                              hyper, grouping)
    return sum(sizes.values())


def expected_run_bytes(cfg: StrategyConfig, spec: ModelSpec, num_checkpoints: int, num_ranks: int,
                       hyper: AdamHyperparams | None = None) -> int:
    """Bytes a fresh training run writes into its checkpoint directories.

    Computed from the layout alone: weight/optimizer payloads per module plus
    the exact header and JSON sizes for each checkpoint's step.
    """
    return sum(expected_checkpoint_bytes(cfg, spec, c, num_ranks, hyper) for c in range(1, num_checkpoints + 1))


def checkpoint_steps(cfg: StrategyConfig, total_steps: int) -> list[int]:
    return list(range(cfg.interval, total_steps + 1, cfg.interval))

