"""Assemble one complete checkpoint from modules of several checkpoints.

A YAML recipe names, for every module, the checkpoint to take it from::

    merge_method: passthrough
    base_checkpoint: run/checkpoint-200     # fallback for unlisted modules
    num_ranks: 2
    slices:
      - source: run/checkpoint-100
        layers: [0, 2]                      # or {start: 0, end: 4}, end exclusive
        targets: [0, 2]                     # optional, defaults to layers
    aux:
      embed_tokens: run/checkpoint-200
      norm: run/checkpoint-100
      lm_head: run/checkpoint-100
    config_from: latest                     # or a checkpoint path

Each layer carries its two optimizer groups and each auxiliary module its one,
so merging is plain byte copying of weight tensors and per-rank shard slices.
Every source rank file is read once.
"""

from __future__ import annotations

import logging
import os
import shutil
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .container import TensorEntry, encode_container, read_container
from .errors import (
    ConsistencyError,
    GeometryError,
    InvalidModule,
    MissingArtifact,
    RecipeError,
    SourceLacksModule,
    StorageError,
    TailorError,
    UnrecoverableModule,
)
from .model import EMBED, LM_HEAD, NORM, ModelSpec, ModuleId, ModuleKind, enumerate_modules, rename_tensor, tensors_of
from .optim import build_group_table, group_indices_for
from .store import (
    CONFIG_FILE,
    MANIFEST,
    OPTIM_META,
    STATE_FIELDS,
    TRAINER_STATE,
    WEIGHTS_FILE,
    CheckpointMeta,
    SaveManifest,
    ShardGeometry,
    dump_json,
    optim_meta_json,
    rank_file,
    read_checkpoint,
    read_meta,
    read_shard,
    write_files,
)

log = logging.getLogger(__name__)

AUX_KEYS = {"embed_tokens": EMBED, "norm": NORM, "lm_head": LM_HEAD}
_TOP_KEYS = ("merge_method", "base_checkpoint", "num_ranks", "slices", "aux", "config_from")
_SLICE_KEYS = ("source", "layers", "targets")


# --------------------------------------------------------------------------- recipe


@dataclass
class SliceSpec:
    source: str
    layers: list[int]
    targets: list[int] | None = None

    @property
    def target_layers(self) -> list[int]:
        return self.layers if self.targets is None else self.targets


@dataclass
class MergeRecipe:
    base_checkpoint: str | None = None
    num_ranks: int | None = None
    slices: list[SliceSpec] = field(default_factory=list)
    aux: dict[str, str] = field(default_factory=dict)
    config_from: str = "latest"
    merge_method: str = "passthrough"

    def sources(self) -> list[str]:
        seen = []
        for p in [self.base_checkpoint, *(s.source for s in self.slices), *self.aux.values()]:
            if p is not None and p not in seen:
                seen.append(p)
        if self.config_from != "latest" and self.config_from not in seen:
            seen.append(self.config_from)
        return seen

    def to_dict(self) -> dict:
        out: dict = {"merge_method": self.merge_method}
        if self.base_checkpoint is not None:
            out["base_checkpoint"] = self.base_checkpoint
        if self.num_ranks is not None:
            out["num_ranks"] = self.num_ranks
        if self.slices:
            out["slices"] = []
            for s in self.slices:
                item = {"source": s.source, "layers": list(s.layers)}
                if s.targets is not None:
                    item["targets"] = list(s.targets)
                out["slices"].append(item)
        if self.aux:
            out["aux"] = {k: self.aux[k] for k in AUX_KEYS if k in self.aux}
        out["config_from"] = self.config_from
        return out

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _path(value, where: str, base_dir: Path | None) -> str:
    if not isinstance(value, str) or not value:
        raise RecipeError(where, "expected a non-empty path string")
    if base_dir is not None and value != "latest" and not os.path.isabs(value):
        return os.path.normpath(str(base_dir / value))
    return os.path.normpath(value) if value != "latest" else value


def _int_list(value, where: str) -> list[int]:
    if not isinstance(value, list) or not value:
        raise RecipeError(where, "expected a non-empty list of layer indices")
    for i, v in enumerate(value):
        if not _is_int(v) or v < 0:
            raise RecipeError(f"{where}[{i}]", f"expected a non-negative integer, got {v!r}")
    return list(value)


def parse_recipe(text: str, base_dir=None) -> MergeRecipe:
    """Validate a YAML recipe. Relative paths are taken relative to ``base_dir`` when given."""
    base_dir = Path(base_dir) if base_dir is not None else None
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise RecipeError("<document>", f"invalid YAML ({exc})") from None
    if not isinstance(doc, dict):
        raise RecipeError("<document>", "recipe must be a mapping")
    for key in doc:
        if key not in _TOP_KEYS:
            raise RecipeError(str(key), "unknown key")

    recipe = MergeRecipe()
    method = doc.get("merge_method", "passthrough")
    if method != "passthrough":
        raise RecipeError("merge_method", f"only 'passthrough' is supported, got {method!r}")
    if doc.get("base_checkpoint") is not None:
        recipe.base_checkpoint = _path(doc["base_checkpoint"], "base_checkpoint", base_dir)
    if "num_ranks" in doc:
        n = doc["num_ranks"]
        if not _is_int(n) or n < 1:
            raise RecipeError("num_ranks", f"expected a positive integer, got {n!r}")
        recipe.num_ranks = n

    slices = doc.get("slices") or []
    if not isinstance(slices, list):
        raise RecipeError("slices", "expected a list")
    for i, item in enumerate(slices):
        where = f"slices[{i}]"
        if not isinstance(item, dict):
            raise RecipeError(where, "expected a mapping")
        for key in item:
            if key not in _SLICE_KEYS:
                raise RecipeError(f"{where}.{key}", "unknown key")
        if "source" not in item:
            raise RecipeError(f"{where}.source", "required")
        if "layers" not in item:
            raise RecipeError(f"{where}.layers", "required")
        layers = item["layers"]
        if isinstance(layers, dict):
            if set(layers) != {"start", "end"}:
                raise RecipeError(f"{where}.layers", "range form needs exactly 'start' and 'end'")
            start, end = layers["start"], layers["end"]
            if not (_is_int(start) and _is_int(end)) or not 0 <= start < end:
                raise RecipeError(f"{where}.layers", f"invalid range [{start!r}, {end!r})")
            layers = list(range(start, end))
        else:
            layers = _int_list(layers, f"{where}.layers")
        if len(set(layers)) != len(layers):
            raise RecipeError(f"{where}.layers", "repeated layer index")
        targets = None
        if item.get("targets") is not None:
            targets = _int_list(item["targets"], f"{where}.targets")
            if len(targets) != len(layers):
                raise RecipeError(f"{where}.targets", f"{len(targets)} targets for {len(layers)} layers")
        recipe.slices.append(SliceSpec(_path(item["source"], f"{where}.source", base_dir), layers, targets))

    aux = doc.get("aux") or {}
    if not isinstance(aux, dict):
        raise RecipeError("aux", "expected a mapping")
    for key, value in aux.items():
        if key not in AUX_KEYS:
            raise RecipeError(f"aux.{key}", "unknown key (expected embed_tokens, norm or lm_head)")
        recipe.aux[key] = _path(value, f"aux.{key}", base_dir)

    recipe.config_from = _path(doc.get("config_from", "latest"), "config_from", base_dir)
    if not recipe.sources():
        raise RecipeError("<document>", "recipe names no checkpoints")
    return recipe


# --------------------------------------------------------------------------- plan


@dataclass(frozen=True)
class GroupCopy:
    source: str
    source_group: int
    target_group: int


@dataclass
class MergePlan:
    spec: ModelSpec
    num_ranks: int
    modules: dict[ModuleId, tuple[str, ModuleId]]
    group_copies: list[GroupCopy]
    config_source: str
    sources: dict[str, CheckpointMeta]

    def distinct_sources(self) -> list[str]:
        return sorted({src for src, _ in self.modules.values()})


def _load_sources(paths) -> dict[str, CheckpointMeta]:
    return {p: read_meta(p) for p in paths}


def resolve_plan(recipe: MergeRecipe, sources: dict[str, CheckpointMeta] | None = None) -> MergePlan:
    """Map every module of the model to exactly one source, or fail before any I/O-heavy work."""
    sources = dict(sources or {})
    for p in recipe.sources():
        if p not in sources:
            sources[p] = read_meta(p)
    first = sources[recipe.sources()[0]]
    spec = first.spec
    num_ranks = recipe.num_ranks if recipe.num_ranks is not None else first.num_ranks
    for p, meta in sources.items():
        if not meta.spec.same_geometry(spec):
            raise GeometryError(f"{p} has a different model geometry than {first.path}")
        if meta.num_ranks != num_ranks:
            raise GeometryError(f"{p} was saved with {meta.num_ranks} ranks, merge expects {num_ranks}")

    assigned: dict[ModuleId, tuple[str, ModuleId]] = {}

    def assign(target: ModuleId, src: str, src_mod: ModuleId, where: str):
        try:
            spec.check_module(target)
            spec.check_module(src_mod)
        except InvalidModule as exc:
            raise RecipeError(where, str(exc)) from None
        if target in assigned:
            raise RecipeError(where, f"{target} is targeted more than once")
        if src_mod not in sources[src].manifest.modules:
            raise SourceLacksModule(src_mod, src)
        assigned[target] = (src, src_mod)

    for i, s in enumerate(recipe.slices):
        for layer, target in zip(s.layers, s.target_layers):
            assign(ModuleId.layer(target), s.source, ModuleId.layer(layer), f"slices[{i}]")
    for key, src in recipe.aux.items():
        mod = AUX_KEYS[key]
        if mod.kind is ModuleKind.LM_HEAD and spec.weight_tied:
            raise RecipeError(f"aux.{key}", "model is weight-tied and has no lm_head")
        assign(mod, src, mod, f"aux.{key}")
    missing = [m for m in enumerate_modules(spec) if m not in assigned]
    if missing and recipe.base_checkpoint is not None:
        base = recipe.base_checkpoint
        for m in missing:
            assign(m, base, m, "base_checkpoint")
        missing = []
    if missing:
        raise RecipeError("<coverage>", "no source for " + ", ".join(m.name for m in missing))

    table = build_group_table(spec)
    copies = []
    for target in enumerate_modules(spec):
        src, src_mod = assigned[target]
        for sg, tg in zip(group_indices_for(table, src_mod), group_indices_for(table, target)):
            if table[sg].element_count != table[tg].element_count:
                raise GeometryError(f"group {sg} -> {tg} element counts differ")
            copies.append(GroupCopy(src, sg, tg))
    copies.sort(key=lambda c: c.target_group)
    if [c.target_group for c in copies] != list(range(len(table))):
        raise ConsistencyError("group copy list does not cover every target group once")

    used = sorted({src for src, _ in assigned.values()})
    if recipe.config_from == "latest":
        config_source = max(used, key=lambda p: (sources[p].step, p))
    else:
        config_source = recipe.config_from
        if not sources[config_source].spec.same_geometry(spec):
            raise GeometryError(f"config_from {config_source} has a different model geometry")
    ordered = {m: assigned[m] for m in enumerate_modules(spec)}
    return MergePlan(spec, num_ranks, ordered, copies, config_source, sources)


# --------------------------------------------------------------------------- merge


@dataclass
class IOStats:
    shard_reads: int = 0
    weight_reads: int = 0
    files_written: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def count_shard(self):
        with self._lock:
            self.shard_reads += 1


def merge_weights(plan: MergePlan, stats: IOStats | None = None) -> dict[str, TensorEntry]:
    stats = stats or IOStats()
    containers = {}
    for src in plan.distinct_sources():
        containers[src] = read_container(plan.sources[src].path / WEIGHTS_FILE)
        stats.weight_reads += 1
    out = {}
    for target, (src, src_mod) in plan.modules.items():
        for decl in tensors_of(plan.spec, src_mod):
            entry = containers[src][decl.name]
            if entry.shape != decl.shape:
                raise GeometryError(f"{src}: {decl.name} has shape {entry.shape}, expected {decl.shape}")
            out[rename_tensor(decl.name, target)] = entry
    return out


def merge_optimizer_shards(plan: MergePlan, workers: int | None = None,
                           stats: IOStats | None = None) -> tuple[list[dict[str, TensorEntry]], dict]:
    """Per-rank output entries plus the output ``optim_meta`` document.

    Source rank files are loaded on a thread pool (``workers=1`` is serial);
    assembly walks target groups in order, so the output never depends on
    completion order.
    """
    stats = stats or IOStats()
    workers = workers or plan.num_ranks
    srcs = sorted({c.source for c in plan.group_copies})

    def load(src, r):
        entries = read_shard(plan.sources[src], r)
        stats.count_shard()
        return entries

    outputs: list[dict[str, TensorEntry]] = []
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for r in range(plan.num_ranks):
            futures = {src: pool.submit(load, src, r) for src in srcs}
            loaded = {src: f.result() for src, f in futures.items()}
            entries = {}
            for c in plan.group_copies:
                for fname in STATE_FIELDS:
                    entries[f"g{c.target_group}.{fname}"] = loaded[c.source][f"g{c.source_group}.{fname}"]
            outputs.append(entries)

    table = build_group_table(plan.spec)
    geom = ShardGeometry.for_groups(table, range(len(table)), plan.num_ranks)
    hypers = {c.target_group: plan.sources[c.source].hypers[c.source_group] for c in plan.group_copies}
    cfg_meta = plan.sources[plan.config_source].optim_meta
    meta = optim_meta_json(table, geom, hypers, int(cfg_meta["t"]), cfg_meta.get("grouping", "fine"))
    return outputs, meta


def copy_config(plan: MergePlan) -> dict[str, bytes]:
    """config.json and trainer_state.json bytes from the config source, plus a provenance manifest."""
    src = plan.sources[plan.config_source].path
    files = {}
    for name in (CONFIG_FILE, TRAINER_STATE):
        try:
            files[name] = (src / name).read_bytes()
        except FileNotFoundError:
            raise MissingArtifact(src / name) from None
    provenance = {
        target.name: {"source": path, "step": plan.sources[path].step}
        for target, (path, _) in plan.modules.items()
    }
    manifest = SaveManifest(plan.sources[plan.config_source].step, "merged", list(plan.modules), provenance)
    files[MANIFEST] = dump_json(manifest.to_json())
    return files


@dataclass
class MergeReport:
    out: Path
    sources: int
    shard_files_read: int
    weight_files_read: int
    files_written: int
    seconds: float

    def to_json(self) -> dict:
        return {
            "files_written": self.files_written,
            "out": str(self.out),
            "seconds": self.seconds,
            "shard_files_read": self.shard_files_read,
            "sources": self.sources,
            "weight_files_read": self.weight_files_read,
        }


def merge(recipe: MergeRecipe, out, workers: int | None = None, overwrite: bool = False) -> MergeReport:
    """Resolve, merge and write a complete checkpoint at ``out``; nothing is written on error."""
    t0 = time.perf_counter()
    out = Path(out)
    plan = resolve_plan(recipe)
    for meta in plan.sources.values():
        if out.resolve() == meta.path.resolve():
            raise StorageError(f"output {out} would overwrite a source checkpoint")
    stats = IOStats()
    weights = merge_weights(plan, stats)
    shards, meta = merge_optimizer_shards(plan, workers, stats)
    files = {WEIGHTS_FILE: encode_container(weights)}
    for r, entries in enumerate(shards):
        files[rank_file(r)] = encode_container(entries)
    files[OPTIM_META] = dump_json(meta)
    files.update(copy_config(plan))
    write_files(out, files, overwrite=overwrite)
    try:
        ckpt = read_checkpoint(out)
        if not ckpt.meta.is_complete:
            raise ConsistencyError(f"merged checkpoint misses {ckpt.meta.missing_modules}")
    except (TailorError, ConsistencyError) as exc:
        shutil.rmtree(out, ignore_errors=True)
        raise ConsistencyError(f"merged checkpoint failed verification: {exc}") from exc
    report = MergeReport(out, len(plan.distinct_sources()), stats.shard_reads, stats.weight_reads, len(files),
                         time.perf_counter() - t0)
    log.info("merged %d sources into %s in %.3fs", report.sources, out, report.seconds)
    return report


# --------------------------------------------------------------------------- auto recipe


def recipe_from_manifests(run_dir, failure_step: int) -> MergeRecipe:
    """Newest saved copy of every module at or before ``failure_step``."""
    from .trainer import list_checkpoints

    run_dir = Path(run_dir).resolve()
    found = list_checkpoints(run_dir)
    if not found:
        raise MissingArtifact(run_dir, "no checkpoints in run directory")
    metas = [read_meta(p) for step, p in found if step <= failure_step]
    if not metas:
        raise UnrecoverableModule(enumerate_modules(read_meta(found[0][1]).spec))
    metas.sort(key=lambda m: (m.step, str(m.path)))
    spec = metas[-1].spec
    newest: dict[ModuleId, CheckpointMeta] = {}
    for meta in metas:
        for m in meta.modules:
            newest[m] = meta
    missing = [m for m in enumerate_modules(spec) if m not in newest]
    if missing:
        raise UnrecoverableModule(missing)

    latest = metas[-1]
    steps = {str(meta.path): meta.step for meta in newest.values()}
    if len(steps) == 1:
        return MergeRecipe(base_checkpoint=next(iter(steps)), num_ranks=latest.num_ranks,
                           config_from=str(latest.path))
    recipe = MergeRecipe(num_ranks=latest.num_ranks, config_from=str(latest.path))
    by_source: dict[str, list[int]] = {}
    for m, meta in newest.items():
        if m.is_layer:
            by_source.setdefault(str(meta.path), []).append(m.index)
    for src in sorted(by_source, key=lambda p: (-steps[p], p)):
        recipe.slices.append(SliceSpec(src, sorted(by_source[src])))
    for key, mod in AUX_KEYS.items():
        if mod in newest:
            recipe.aux[key] = str(newest[mod].path)
    return recipe
