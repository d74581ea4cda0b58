"""ckpt-tailor command line.

Exit codes: 0 success, 1 user error (bad input, bad recipe, missing files,
geometry mismatch, verify divergence), 2 internal or consistency error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import yaml

from .errors import ConsistencyError, TailorError
from .model import ModelSpec
from .report import compare_checkpoints, inspect_checkpoint, parse_module_list, size_report, state_digest
from .strategies import KINDS, StrategyConfig
from .tailor import merge, parse_recipe, recipe_from_manifests
from .trainer import resume, train

log = logging.getLogger("ckpt_tailor")


class UsageError(TailorError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _emit(args, obj, human: str):
    if getattr(args, "json", False):
        print(json.dumps(obj, sort_keys=True))
    else:
        print(human)


def _load_spec(args) -> ModelSpec:
    cfg = {"num_layers": 4}
    if args.config:
        try:
            loaded = yaml.safe_load(Path(args.config).read_text())
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(loaded, dict):
            raise UsageError(f"{args.config}: expected a mapping of model fields")
        unknown = set(loaded) - {"num_layers", "hidden_dim", "ffn_dim", "vocab_size", "weight_tied", "seed"}
        if unknown:
            raise UsageError(f"{args.config}: unknown keys {sorted(unknown)}")
        cfg.update(loaded)
    for flag, key in (("layers", "num_layers"), ("hidden", "hidden_dim"), ("ffn", "ffn_dim"),
                      ("vocab", "vocab_size"), ("seed", "seed")):
        value = getattr(args, flag)
        if value is not None:
            cfg[key] = value
    if args.tied:
        cfg["weight_tied"] = True
    return ModelSpec(**cfg)


def _strategy(args) -> StrategyConfig:
    if args.strategy not in KINDS:
        raise UsageError(f"--strategy must be one of {', '.join(KINDS)}, got {args.strategy!r}")
    try:
        return StrategyConfig(kind=args.strategy, interval=args.interval)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_train(args) -> int:
    cfg = _strategy(args)
    spec = _load_spec(args)
    try:
        cfg.validate_for(spec)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    result = train(spec, cfg, args.steps, args.out, num_ranks=args.ranks, grouping=args.grouping)
    ckpts = sorted(p.name for p in Path(args.out).glob("checkpoint-*"))
    _emit(args, {"run": str(args.out), "step": result.step, "checkpoints": ckpts,
                 "digest": state_digest(result.state)},
          f"trained {result.step} steps ({cfg.kind}); wrote {len(ckpts)} checkpoints to {args.out}")
    return 0


def cmd_plan(args) -> int:
    recipe = recipe_from_manifests(args.run, args.failure_step)
    text = recipe.to_yaml()
    Path(args.out).write_text(text)
    print(text, end="")
    return 0


def cmd_merge(args) -> int:
    recipe_path = Path(args.recipe)
    try:
        text = recipe_path.read_text()
    except OSError as exc:
        raise UsageError(f"cannot read recipe {recipe_path}: {exc}") from None
    recipe = parse_recipe(text, base_dir=recipe_path.parent)
    if args.workers is not None and args.workers < 1:
        raise UsageError("--workers must be >= 1")
    report = merge(recipe, args.out, workers=args.workers)
    _emit(args, report.to_json(),
          f"merged {report.sources} checkpoints into {report.out}\n"
          f"  optimizer shard files read: {report.shard_files_read}\n"
          f"  weight files read:          {report.weight_files_read}\n"
          f"  files written:              {report.files_written}\n"
          f"  wall time:                  {report.seconds:.3f}s")
    return 0


def cmd_resume(args) -> int:
    cfg = None
    if args.out is not None:
        cfg = StrategyConfig(kind=args.strategy, interval=args.interval) if args.strategy in KINDS else None
        if cfg is None:
            raise UsageError(f"--strategy must be one of {', '.join(KINDS)}")
    t0 = time.perf_counter()
    result = resume(args.ckpt, args.steps, args.out, cfg)
    _emit(args, {"step": result.step, "digest": state_digest(result.state)},
          f"resumed to step {result.step} in {time.perf_counter() - t0:.3f}s; "
          f"state digest {state_digest(result.state)}")
    return 0


def cmd_inspect(args) -> int:
    info = inspect_checkpoint(args.ckpt)
    if args.json:
        print(json.dumps(info, sort_keys=True))
        return 0
    print(f"{info['path']}  step={info['step']}  strategy={info['strategy']}  "
          f"complete={info['complete']}  ranks={info['num_ranks']}")
    print(f"{'module':<16} {'step':>8}  source")
    for row in info["modules"]:
        if row["present"] or "step" in row:
            print(f"{row['module']:<16} {row['step']:>8}  {row['source']}")
        else:
            print(f"{row['module']:<16} {'-':>8}  (not saved)")
    s = info["sizes"]
    print(f"weights (bf16)     {s['weights']:>12} B")
    print(f"optimizer shards   {s['optimizer']:>12} B  (payload {s['optimizer_payload']} B)")
    print(f"metadata           {s['metadata']:>12} B")
    print(f"total              {s['total']:>12} B  = {info['total_over_weights']:.3f} x weights file "
          f"({info['payload_ratio']:.3f} x by payload)")
    return 0


def cmd_verify(args) -> int:
    modules = parse_module_list(args.modules) if args.modules else None
    diff = compare_checkpoints(args.a, args.b, modules)
    if diff is None:
        _emit(args, {"equal": True}, "checkpoints are bitwise equal on the compared modules")
        return 0
    _emit(args, {"equal": False, "first_divergence": diff}, f"first divergence: {json.dumps(diff, sort_keys=True)}")
    return 1


def cmd_size_report(args) -> int:
    rep = size_report(args.run)
    if args.json:
        print(json.dumps(rep, sort_keys=True))
        return 0
    for row in rep["checkpoints"]:
        print(f"checkpoint-{row['step']:<8} modules={row['modules']:<4} {row['bytes']:>12} B  "
              f"(full: {row['full_bytes']} B)")
    ratio = rep["ratio"]
    print(f"total {rep['total_bytes']} B vs full-checkpoint equivalent {rep['full_equivalent_bytes']} B"
          + (f"  ratio {ratio:.4f}" if ratio is not None else ""))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ckpt-tailor", description="Split and merge layer-wise partial training checkpoints.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="run the toy trainer and write checkpoints")
    t.add_argument("--config", help="YAML/JSON file with model fields (num_layers, hidden_dim, ...)")
    t.add_argument("--steps", type=int, required=True)
    t.add_argument("--interval", type=int, default=10)
    t.add_argument("--strategy", default="full")
    t.add_argument("--ranks", type=int, default=2)
    t.add_argument("--out", required=True)
    t.add_argument("--layers", type=int)
    t.add_argument("--hidden", type=int)
    t.add_argument("--ffn", type=int)
    t.add_argument("--vocab", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--tied", action="store_true")
    t.add_argument("--grouping", choices=("fine", "coarse"), default="fine")
    t.add_argument("--json", action="store_true")
    t.set_defaults(func=cmd_train)

    pl = sub.add_parser("plan", help="write a merge recipe from a run's manifests")
    pl.add_argument("--run", required=True)
    pl.add_argument("--failure-step", type=int, required=True)
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plan)

    m = sub.add_parser("merge", help="assemble a complete checkpoint from a recipe")
    m.add_argument("--recipe", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--workers", type=int, help="shard loading threads (default: number of ranks)")
    m.add_argument("--json", action="store_true")
    m.set_defaults(func=cmd_merge)

    r = sub.add_parser("resume", help="continue training from a complete checkpoint")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--steps", type=int, required=True)
    r.add_argument("--out", help="run directory for the continuation's log and checkpoints")
    r.add_argument("--interval", type=int, default=10)
    r.add_argument("--strategy", default="full")
    r.add_argument("--json", action="store_true")
    r.set_defaults(func=cmd_resume)

    i = sub.add_parser("inspect", help="show module provenance and size breakdown")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--json", action="store_true")
    i.set_defaults(func=cmd_inspect)

    v = sub.add_parser("verify", help="bitwise comparison of two checkpoints")
    v.add_argument("--a", required=True)
    v.add_argument("--b", required=True)
    v.add_argument("--modules", help="comma separated, e.g. layers.0,norm")
    v.add_argument("--json", action="store_true")
    v.set_defaults(func=cmd_verify)

    s = sub.add_parser("size-report", help="checkpoint bytes of a run vs full checkpoints")
    s.add_argument("--run", required=True)
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_size_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except TailorError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except ConsistencyError as exc:
        print(f"internal error: ConsistencyError: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("unhandled", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
