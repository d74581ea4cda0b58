"""Read-only views of checkpoints and runs: inspection, comparison, size accounting."""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

from .errors import GeometryError
from .model import ModuleId, enumerate_modules, tensors_of
from .optim import AdamHyperparams, OptimState, build_group_table, group_indices_for
from .store import STATE_FIELDS, checkpoint_nbytes, read_checkpoint, read_meta, size_breakdown, trainer_state_json
from .trainer import list_checkpoints


def state_digest(optim: OptimState) -> str:
    h = hashlib.sha256()
    h.update(str(optim.t).encode())
    for g in sorted(optim.groups):
        s = optim.groups[g]
        for arr in (s.master, s.exp_avg, s.exp_avg_sq):
            h.update(arr.tobytes())
    return h.hexdigest()


def inspect_checkpoint(path) -> dict:
    meta = read_meta(path)
    sizes = size_breakdown(path)
    prov = meta.manifest.provenance or {}
    modules = []
    for m in enumerate_modules(meta.spec):
        row = {"module": m.name, "present": m in meta.manifest.modules}
        if m.name in prov:
            row.update(source=prov[m.name]["source"], step=prov[m.name]["step"])
        elif row["present"]:
            row.update(source=str(meta.path), step=meta.step)
        modules.append(row)
    return {
        "path": str(meta.path),
        "step": meta.step,
        "strategy": meta.manifest.strategy,
        "complete": meta.is_complete,
        "num_ranks": meta.num_ranks,
        "config": meta.spec.to_config(),
        "modules": modules,
        "sizes": sizes,
        "total_over_weights": sizes["total"] / sizes["weights"],
        "payload_ratio": (sizes["optimizer_payload"] + 2 * _weight_elems(meta)) / (2 * _weight_elems(meta)),
    }


def _weight_elems(meta) -> int:
    return sum(d.numel for m in meta.modules for d in tensors_of(meta.spec, m))


def _first_mismatch(a: np.ndarray, b: np.ndarray) -> int | None:
    if a.tobytes() == b.tobytes():
        return None
    ai = a.view(np.uint32) if a.dtype == np.float32 else a
    bi = b.view(np.uint32) if b.dtype == np.float32 else b
    return int(np.flatnonzero(ai != bi)[0])


def compare_checkpoints(a, b, modules=None) -> dict | None:
    """First bitwise divergence between two checkpoints, or None.

    Weights, optimizer master/moments and per-group hyperparameters are
    compared module by module; a module saved in only one of them diverges.
    """
    ca, cb = read_checkpoint(a), read_checkpoint(b)
    if not ca.spec.same_geometry(cb.spec):
        raise GeometryError(f"{a} and {b} describe different model geometries")
    spec = ca.spec
    if modules is None:
        have = set(ca.manifest.modules) | set(cb.manifest.modules)
        modules = [m for m in enumerate_modules(spec) if m in have]
    else:
        modules = [m if isinstance(m, ModuleId) else ModuleId.parse(m) for m in modules]
        for m in modules:
            spec.check_module(m)
    table = build_group_table(spec)
    for m in modules:
        for which, ck in (("a", ca), ("b", cb)):
            if m not in ck.manifest.modules:
                return {"module": m.name, "item": "presence", "detail": f"absent from {which}"}
        for decl in tensors_of(spec, m):
            ea, eb = ca.weights[decl.name], cb.weights[decl.name]
            idx = _first_mismatch(ea.array(), eb.array())
            if idx is not None:
                return {"module": m.name, "item": decl.name, "index": idx,
                        "a": int(ea.array()[idx]), "b": int(eb.array()[idx])}
        for g in group_indices_for(table, m):
            sa, sb = ca.optim.groups[g], cb.optim.groups[g]
            if sa.hyper != sb.hyper:
                return {"module": m.name, "item": f"g{g}.hyperparams", "a": sa.hyper.to_dict(), "b": sb.hyper.to_dict()}
            for fname in STATE_FIELDS:
                va, vb = getattr(sa, fname), getattr(sb, fname)
                idx = _first_mismatch(va, vb)
                if idx is not None:
                    return {"module": m.name, "item": f"g{g}.{fname}", "index": idx,
                            "a": float(va[idx]), "b": float(vb[idx])}
    return None


def size_report(run_dir) -> dict:
    """Bytes per checkpoint of a run, and what full checkpoints at the same steps would cost."""
    rows = []
    total = full_equiv = 0
    for step, path in list_checkpoints(run_dir):
        meta = read_meta(path)
        sizes = size_breakdown(path)
        first = meta.hypers[min(meta.hypers)]
        hyper = AdamHyperparams(first.lr, first.beta1, first.beta2, first.eps,
                                max(h.weight_decay for h in meta.hypers.values()))
        ts = dict(meta.trainer_state)
        ts_full = trainer_state_json(ts["step"], ts["lr"], ts["optimizer_t"], "full", ts["checkpoint_counter"],
                                     ts["rng_seed"])
        full = sum(checkpoint_nbytes(meta.spec, enumerate_modules(meta.spec), meta.num_ranks, meta.step, ts_full,
                                     "full", hyper, meta.optim_meta.get("grouping", "fine")).values())
        rows.append({"step": step, "modules": len(meta.modules), "bytes": sizes["total"], "full_bytes": full})
        total += sizes["total"]
        full_equiv += full
    return {
        "run": str(Path(run_dir)),
        "checkpoints": rows,
        "total_bytes": total,
        "full_equivalent_bytes": full_equiv,
        "ratio": total / full_equiv if full_equiv else None,
    }


def parse_module_list(text: str) -> list[ModuleId]:
    return [ModuleId.parse(part.strip()) for part in text.split(",") if part.strip()]
