"""Layer-wise checkpoint tailoring: split, merge and resume partial training checkpoints."""

from .errors import (
    ConsistencyError,
    CorruptContainer,
    GeometryError,
    InvalidModule,
    MissingArtifact,
    MissingModules,
    NonFiniteError,
    RecipeError,
    SourceLacksModule,
    StorageError,
    TailorError,
    UnrecoverableModule,
)
from .model import ModelSpec, ModuleId, enumerate_modules, tensors_of
from .optim import AdamHyperparams, OptimState, apply_step, build_group_table, coarse_to_fine, fine_to_coarse
from .store import read_checkpoint, write_checkpoint
from .strategies import StrategyConfig, expected_run_bytes, modules_to_save
from .tailor import merge, parse_recipe, recipe_from_manifests, resolve_plan
from .trainer import inject_failure, resume, train

__version__ = "0.1.0"
