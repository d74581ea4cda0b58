"""On-disk checkpoint format.

Layout of one checkpoint directory::

    checkpoint-{step}/
        model.weights          bf16 weights of the saved modules, one container
        optim/rank_{r}.shard   rank r's contiguous slice of every saved group
        optim_meta.json        per-group hyperparameters and shard geometry, step t
        config.json            ModelSpec
        trainer_state.json     step, lr, optimizer_t, strategy, checkpoint_counter, rng_seed
        manifest.json          step, strategy, saved modules (+ provenance after a merge)

Each group is zero padded to a multiple of the rank count and cut into equal
contiguous chunks. FP32 masters are authoritative; the bf16 weight file is
derived from them and re-checked on every read.
"""

from __future__ import annotations

import json
import logging
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .container import (
    TensorEntry,
    bf16_round,
    container_size,
    encode_container,
    read_container,
)
from .errors import (
    ConsistencyError,
    CorruptContainer,
    GeometryError,
    InvalidModule,
    MissingArtifact,
    StorageError,
)
from .model import ModelSpec, ModuleId, enumerate_modules, tensors_of
from .optim import AdamHyperparams, GroupState, OptimState, ParameterGroupTable, build_group_table

log = logging.getLogger(__name__)

WEIGHTS_FILE = "model.weights"
OPTIM_DIR = "optim"
OPTIM_META = "optim_meta.json"
CONFIG_FILE = "config.json"
TRAINER_STATE = "trainer_state.json"
MANIFEST = "manifest.json"
STATE_KEYS = ("step", "lr", "optimizer_t", "strategy", "checkpoint_counter", "rng_seed")
STATE_FIELDS = ("master", "exp_avg", "exp_avg_sq")


def checkpoint_name(step: int) -> str:
    return f"checkpoint-{step}"


def rank_file(r: int) -> str:
    return f"{OPTIM_DIR}/rank_{r}.shard"


def dump_json(obj) -> bytes:
    return (json.dumps(obj, sort_keys=True, indent=2) + "\n").encode("utf-8")


def load_json(path: Path):
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise MissingArtifact(path) from None
    except json.JSONDecodeError as exc:
        raise CorruptContainer(f"{path}: invalid JSON ({exc})") from None


# --------------------------------------------------------------------------- sharding


def padded_length(true_length: int, num_ranks: int) -> int:
    return num_ranks * -(-true_length // num_ranks)


@dataclass(frozen=True)
class ShardGeometry:
    num_ranks: int
    true_lengths: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.num_ranks < 1:
            raise GeometryError(f"num_ranks must be >= 1, got {self.num_ranks}")

    def padded_length(self, g: int) -> int:
        return padded_length(self.true_lengths[g], self.num_ranks)

    def shard_length(self, g: int) -> int:
        return self.padded_length(g) // self.num_ranks

    @classmethod
    def for_groups(cls, table: ParameterGroupTable, groups, num_ranks: int) -> ShardGeometry:
        return cls(num_ranks, {g: table[g].element_count for g in sorted(groups)})


def shard_group(values: np.ndarray, num_ranks: int, true_length: int | None = None) -> list[np.ndarray]:
    """Split one flat group into ``num_ranks`` equal contiguous chunks, zero padded."""
    if true_length is not None and len(values) != true_length:
        raise GeometryError(f"group has {len(values)} elements, geometry says {true_length}")
    if num_ranks < 1:
        raise GeometryError(f"num_ranks must be >= 1, got {num_ranks}")
    n = padded_length(len(values), num_ranks)
    buf = np.zeros(n, dtype=values.dtype)
    buf[: len(values)] = values
    return [chunk.copy() for chunk in np.split(buf, num_ranks)]


def unshard_group(shards, true_length: int) -> np.ndarray:
    full = np.concatenate(list(shards))
    if len(full) < true_length:
        raise GeometryError(f"shards hold {len(full)} elements, need {true_length}")
    return full[:true_length].copy()


# --------------------------------------------------------------------------- manifest


@dataclass
class SaveManifest:
    step: int
    strategy: str
    modules: list[ModuleId]
    provenance: dict[str, dict] | None = None

    def to_json(self) -> dict:
        out = {"modules": [m.name for m in self.modules], "step": self.step, "strategy": self.strategy}
        if self.provenance is not None:
            out["provenance"] = self.provenance
        return out

    @classmethod
    def from_json(cls, d: dict) -> SaveManifest:
        try:
            return cls(
                int(d["step"]),
                str(d["strategy"]),
                [ModuleId.parse(n) for n in d["modules"]],
                d.get("provenance"),
            )
        except (KeyError, TypeError, InvalidModule) as exc:
            raise CorruptContainer(f"malformed manifest ({exc})") from None


# --------------------------------------------------------------------------- rendering


def _canonical_modules(spec: ModelSpec, modules) -> list[ModuleId]:
    wanted = set(modules)
    for m in wanted:
        spec.check_module(m)
    return [m for m in enumerate_modules(spec) if m in wanted]


def weights_layout(spec: ModelSpec, modules) -> dict[str, tuple[str, tuple[int, ...]]]:
    return {d.name: ("BF16", d.shape) for m in modules for d in tensors_of(spec, m)}


def shard_layout(geom: ShardGeometry) -> dict[str, tuple[str, tuple[int, ...]]]:
    return {f"g{g}.{f}": ("F32", (geom.shard_length(g),)) for g in geom.true_lengths for f in STATE_FIELDS}


def optim_meta_json(table: ParameterGroupTable, geom: ShardGeometry, hypers: dict[int, AdamHyperparams],
                    t: int, grouping: str) -> dict:
    groups = []
    for g in sorted(geom.true_lengths):
        info = table[g]
        entry = {
            "decay_class": info.decay_class.value,
            "index": g,
            "owner": info.owner.name,
            "padded_length": geom.padded_length(g),
            "shard_length": geom.shard_length(g),
            "true_length": geom.true_lengths[g],
        }
        entry.update(hypers[g].to_dict())
        groups.append(entry)
    return {"grouping": grouping, "groups": groups, "num_ranks": geom.num_ranks, "t": t}


def trainer_state_json(step: int, lr: float, optimizer_t: int, strategy: str, checkpoint_counter: int,
                       rng_seed: int) -> dict:
    return {
        "checkpoint_counter": checkpoint_counter,
        "lr": lr,
        "optimizer_t": optimizer_t,
        "rng_seed": rng_seed,
        "step": step,
        "strategy": strategy,
    }


def checkpoint_nbytes(spec: ModelSpec, modules, num_ranks: int, step: int, trainer_state: dict,
                      strategy: str, hyper: AdamHyperparams, grouping: str = "fine") -> dict[str, int]:
    """Exact per-file byte sizes of a checkpoint, computed without any tensor data."""
    modules = _canonical_modules(spec, modules)
    table = build_group_table(spec)
    geom = ShardGeometry.for_groups(table, table.groups_for_modules(modules), num_ranks)
    hypers = {g: hyper.for_class(table[g].decay_class) for g in geom.true_lengths}
    sizes = {WEIGHTS_FILE: container_size(weights_layout(spec, modules))}
    shard_bytes = container_size(shard_layout(geom))
    for r in range(num_ranks):
        sizes[rank_file(r)] = shard_bytes
    sizes[OPTIM_META] = len(dump_json(optim_meta_json(table, geom, hypers, trainer_state["optimizer_t"], grouping)))
    sizes[CONFIG_FILE] = len(dump_json(spec.to_config()))
    sizes[TRAINER_STATE] = len(dump_json(trainer_state))
    sizes[MANIFEST] = len(dump_json(SaveManifest(step, strategy, modules).to_json()))
    return sizes


# --------------------------------------------------------------------------- write


def derive_weights(spec: ModelSpec, table: ParameterGroupTable, modules, optim: OptimState) -> dict[str, TensorEntry]:
    locs = table.tensor_locations()
    out = {}
    for m in modules:
        for decl in tensors_of(spec, m):
            g, off, _ = locs[decl.name]
            out[decl.name] = TensorEntry.bf16(bf16_round(optim.groups[g].master[off:off + decl.numel]), decl.shape)
    return out


def check_weight_master(spec: ModelSpec, table: ParameterGroupTable, modules, optim: OptimState,
                        weights: dict[str, TensorEntry]) -> list[str]:
    """Names of tensors whose stored bf16 bytes differ from bf16(master)."""
    expected = derive_weights(spec, table, modules, optim)
    bad = [n for n in expected if n not in weights or weights[n] != expected[n]]
    bad += sorted(set(weights) - set(expected))
    return bad


def write_files(path: Path, files: dict[str, bytes], overwrite: bool = False) -> None:
    """Write a whole checkpoint directory via a sibling temp dir and a rename."""
    path = Path(path)
    if path.exists() and not overwrite:
        raise StorageError(f"refusing to overwrite existing {path}")
    tmp = path.with_name(path.name + ".partial")
    try:
        if tmp.exists():
            shutil.rmtree(tmp)
        for rel in sorted(files):
            target = tmp / rel
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_bytes(files[rel])
        if path.exists():
            shutil.rmtree(path)
        os.replace(tmp, path)
    except OSError as exc:
        shutil.rmtree(tmp, ignore_errors=True)
        raise StorageError(f"cannot write checkpoint {path}: {exc}") from exc


def write_checkpoint(path, spec: ModelSpec, step: int, modules, optim: OptimState, num_ranks: int,
                     trainer_state: dict, strategy: str, weights: dict[str, TensorEntry] | None = None,
                     grouping: str = "fine", provenance: dict | None = None, overwrite: bool = False) -> Path:
    """Write a (possibly partial) checkpoint holding exactly ``modules``.

    ``optim`` must hold the fine groups owned by those modules and nothing
    else. When ``weights`` is omitted they are derived from the masters.
    """
    path = Path(path)
    if not modules:
        raise ConsistencyError("refusing to write a checkpoint with no modules")
    modules = _canonical_modules(spec, modules)
    table = build_group_table(spec)
    groups = table.groups_for_modules(modules)
    if sorted(optim.groups) != groups:
        raise ConsistencyError(f"optimizer groups {sorted(optim.groups)} do not match modules' groups {groups}")
    for g in groups:
        if optim.groups[g].true_length != table[g].element_count:
            raise ConsistencyError(f"group {g} holds {optim.groups[g].true_length} elements, "
                                   f"expected {table[g].element_count}")
    if set(trainer_state) != set(STATE_KEYS):
        raise ConsistencyError(f"trainer_state keys {sorted(trainer_state)} != {sorted(STATE_KEYS)}")
    if weights is None:
        weights = derive_weights(spec, table, modules, optim)
    else:
        bad = check_weight_master(spec, table, modules, optim, weights)
        if bad:
            raise ConsistencyError(f"bf16 weights disagree with masters: {bad[:5]}")

    geom = ShardGeometry.for_groups(table, groups, num_ranks)
    files = {WEIGHTS_FILE: encode_container(weights)}
    per_rank: list[dict[str, TensorEntry]] = [{} for _ in range(num_ranks)]
    for g in groups:
        s = optim.groups[g]
        for fname, arr in zip(STATE_FIELDS, (s.master, s.exp_avg, s.exp_avg_sq)):
            for r, chunk in enumerate(shard_group(arr, num_ranks)):
                per_rank[r][f"g{g}.{fname}"] = TensorEntry.f32(chunk)
    for r, entries in enumerate(per_rank):
        files[rank_file(r)] = encode_container(entries)
    hypers = {g: optim.groups[g].hyper for g in groups}
    files[OPTIM_META] = dump_json(optim_meta_json(table, geom, hypers, optim.t, grouping))
    files[CONFIG_FILE] = dump_json(spec.to_config())
    files[TRAINER_STATE] = dump_json(trainer_state)
    files[MANIFEST] = dump_json(SaveManifest(step, strategy, modules, provenance).to_json())
    write_files(path, files, overwrite=overwrite)
    log.debug("wrote %s (%d modules, %d ranks)", path, len(modules), num_ranks)
    return path


# --------------------------------------------------------------------------- read


@dataclass
class CheckpointMeta:
    """Everything in a checkpoint except tensor payloads."""

    path: Path
    spec: ModelSpec
    manifest: SaveManifest
    trainer_state: dict
    optim_meta: dict
    geometry: ShardGeometry
    hypers: dict[int, AdamHyperparams]

    @property
    def step(self) -> int:
        return self.manifest.step

    @property
    def num_ranks(self) -> int:
        return self.geometry.num_ranks

    @property
    def modules(self) -> list[ModuleId]:
        return list(self.manifest.modules)

    @property
    def missing_modules(self) -> list[ModuleId]:
        have = set(self.manifest.modules)
        return [m for m in enumerate_modules(self.spec) if m not in have]

    @property
    def is_complete(self) -> bool:
        return not self.missing_modules


@dataclass
class Checkpoint:
    meta: CheckpointMeta
    weights: dict[str, TensorEntry]
    optim: OptimState

    @property
    def spec(self) -> ModelSpec:
        return self.meta.spec

    @property
    def step(self) -> int:
        return self.meta.step

    @property
    def manifest(self) -> SaveManifest:
        return self.meta.manifest

    @property
    def geometry(self) -> ShardGeometry:
        return self.meta.geometry


def read_meta(path) -> CheckpointMeta:
    path = Path(path)
    if not path.is_dir():
        raise MissingArtifact(path, "not a checkpoint directory")
    try:
        spec = ModelSpec.from_config(load_json(path / CONFIG_FILE))
    except (TypeError, GeometryError) as exc:
        raise CorruptContainer(f"{path / CONFIG_FILE}: {exc}") from None
    manifest = SaveManifest.from_json(load_json(path / MANIFEST))
    try:
        modules = _canonical_modules(spec, manifest.modules)
    except InvalidModule as exc:
        raise CorruptContainer(f"{path / MANIFEST}: {exc}") from None
    if not modules or len(modules) != len(manifest.modules):
        raise CorruptContainer(f"{path / MANIFEST}: module list empty or repeated")
    trainer_state = load_json(path / TRAINER_STATE)
    meta = load_json(path / OPTIM_META)
    table = build_group_table(spec)
    try:
        num_ranks = int(meta["num_ranks"])
        groups = meta["groups"]
        lengths = {int(e["index"]): int(e["true_length"]) for e in groups}
        hypers = {int(e["index"]): AdamHyperparams.from_dict(e) for e in groups}
        int(meta["t"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptContainer(f"{path / OPTIM_META}: malformed ({exc})") from None
    expected = table.groups_for_modules(modules)
    if sorted(lengths) != expected:
        raise CorruptContainer(f"{path}: optimizer groups {sorted(lengths)} do not match manifest {expected}")
    for g, n in lengths.items():
        if n != table[g].element_count:
            raise GeometryError(f"{path}: group {g} has {n} elements, model expects {table[g].element_count}")
    geom = ShardGeometry(num_ranks, dict(sorted(lengths.items())))
    existing = sorted((path / OPTIM_DIR).glob("rank_*.shard")) if (path / OPTIM_DIR).is_dir() else []
    if len(existing) > num_ranks:
        raise GeometryError(f"{path}: {len(existing)} rank files on disk, metadata says {num_ranks}")
    return CheckpointMeta(path, spec, SaveManifest(manifest.step, manifest.strategy, modules, manifest.provenance),
                          trainer_state, meta, geom, hypers)


def read_shard(meta: CheckpointMeta, r: int) -> dict[str, TensorEntry]:
    """Load and validate one rank file."""
    f = meta.path / rank_file(r)
    entries = read_container(f)
    expected = shard_layout(meta.geometry)
    if set(entries) != set(expected):
        raise GeometryError(f"{f}: entries do not match the group geometry (rank count disagreement?)")
    for name, (_, shape) in expected.items():
        if entries[name].shape != shape or entries[name].dtype != "F32":
            raise GeometryError(f"{f}: {name} has shape {entries[name].shape}, expected {shape}")
    return entries


def read_checkpoint(path, verify: bool = True) -> Checkpoint:
    """Load a checkpoint; groups are unsharded and their padding removed."""
    meta = read_meta(path)
    path = meta.path
    weights = read_container(path / WEIGHTS_FILE)
    expected = weights_layout(meta.spec, meta.modules)
    if set(weights) != set(expected):
        raise CorruptContainer(f"{path / WEIGHTS_FILE}: tensors do not match the manifest modules")
    for name, (dtype, shape) in expected.items():
        if weights[name].dtype != dtype or weights[name].shape != shape:
            raise CorruptContainer(f"{path / WEIGHTS_FILE}: {name} is {weights[name].dtype}{list(weights[name].shape)}")

    geom = meta.geometry
    shards = [read_shard(meta, r) for r in range(geom.num_ranks)]
    groups = {}
    for g, n in geom.true_lengths.items():
        arrays = []
        for fname in STATE_FIELDS:
            full = np.concatenate([shards[r][f"g{g}.{fname}"].array() for r in range(geom.num_ranks)])
            if np.any(full[n:].view(np.uint32)):
                raise CorruptContainer(f"{path}: non-zero padding in group {g} {fname}")
            arrays.append(full[:n].copy())
        groups[g] = GroupState(*arrays, meta.hypers[g])
    optim = OptimState(groups, int(meta.optim_meta["t"]))
    ckpt = Checkpoint(meta, weights, optim)
    if verify:
        table = build_group_table(meta.spec)
        bad = check_weight_master(meta.spec, table, meta.modules, optim, weights)
        if bad:
            raise CorruptContainer(f"{path}: bf16 weights disagree with masters for {bad[:5]}")
    return ckpt


def size_breakdown(path) -> dict[str, int]:
    """Bytes on disk split into weights, optimizer payload/headers and metadata."""
    path = Path(path)
    meta = read_meta(path)
    weights = (path / WEIGHTS_FILE).stat().st_size
    shard_files = sum((path / rank_file(r)).stat().st_size for r in range(meta.num_ranks))
    payload = 3 * 4 * sum(meta.geometry.padded_length(g) for g in meta.geometry.true_lengths)
    json_bytes = sum((path / f).stat().st_size for f in (OPTIM_META, CONFIG_FILE, TRAINER_STATE, MANIFEST))
    total = weights + shard_files + json_bytes
    return {
        "weights": weights,
        "optimizer": shard_files,
        "optimizer_payload": payload,
        "metadata": json_bytes,
        "total": total,
    }


def directory_bytes(path) -> int:
    return sum(p.stat().st_size for p in Path(path).rglob("*") if p.is_file())
