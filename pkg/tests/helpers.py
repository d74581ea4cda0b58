from pathlib import Path

import numpy as np

from ckpt_tailor.model import enumerate_modules
from ckpt_tailor.optim import AdamHyperparams, GroupState, OptimState, build_group_table
from ckpt_tailor.store import checkpoint_name, trainer_state_json, write_checkpoint


def random_state(spec, rng, modules=None, t=7, hyper=None):
    """Random optimizer state over the groups owned by ``modules``."""
    hyper = hyper or AdamHyperparams()
    table = build_group_table(spec)
    modules = enumerate_modules(spec) if modules is None else modules
    groups = {}
    for g in table.groups_for_modules(modules):
        n = table[g].element_count
        groups[g] = GroupState(
            rng.standard_normal(n).astype(np.float32),
            rng.standard_normal(n).astype(np.float32),
            np.abs(rng.standard_normal(n)).astype(np.float32),
            hyper.for_class(table[g].decay_class),
        )
    return OptimState(groups, t)


def write_random_ckpt(root, spec, rng, modules=None, num_ranks=2, step=100, strategy="full", counter=1):
    modules = enumerate_modules(spec) if modules is None else modules
    state = random_state(spec, rng, modules, t=step)
    ts = trainer_state_json(step, 1e-3, step, strategy, counter, spec.seed)
    path = Path(root) / checkpoint_name(step)
    write_checkpoint(path, spec, step, modules, state, num_ranks, ts, strategy)
    return path, state


def dir_bytes(path):
    path = Path(path)
    return {str(p.relative_to(path)): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


def assemble_oracle(spec, mapping):
    """Brute-force in-memory merge.

    ``mapping`` is {target ModuleId: (source checkpoint path, source ModuleId)}.
    Returns (weights {name: raw bytes}, OptimState) built by reading each
    source in full and copying whole groups and tensors by name.
    """
    from ckpt_tailor.model import rename_tensor, tensors_of
    from ckpt_tailor.optim import group_indices_for
    from ckpt_tailor.store import read_checkpoint

    table = build_group_table(spec)
    cache = {}
    weights, groups = {}, {}
    for target, (src, src_mod) in mapping.items():
        if src not in cache:
            cache[src] = read_checkpoint(src)
        ck = cache[src]
        for decl in tensors_of(spec, src_mod):
            weights[rename_tensor(decl.name, target)] = ck.weights[decl.name].data
        for sg, tg in zip(group_indices_for(table, src_mod), group_indices_for(table, target)):
            groups[tg] = ck.optim.groups[sg].copy()
    return weights, OptimState(dict(sorted(groups.items())), 0)
