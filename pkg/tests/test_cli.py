import json
import subprocess
import sys

import numpy as np
import pytest

from ckpt_tailor.cli import main
from ckpt_tailor.model import LM_HEAD, NORM, ModelSpec, ModuleId, enumerate_modules
from ckpt_tailor.store import read_checkpoint, read_meta, trainer_state_json, write_checkpoint
from ckpt_tailor.trainer import inject_failure

from helpers import assemble_oracle, dir_bytes, write_random_ckpt


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def parity_run(tmp_path, capsys):
    run_dir = tmp_path / "run"
    code, out, _ = run(capsys, "train", "--strategy", "parity", "--steps", "400", "--interval", "100",
                       "--out", str(run_dir), "--json")
    assert code == 0
    return run_dir, json.loads(out)


def test_train_parity_writes_four(parity_run):
    run_dir, info = parity_run
    assert info["checkpoints"] == ["checkpoint-100", "checkpoint-200", "checkpoint-300", "checkpoint-400"]
    assert info["step"] == 400


def test_plan_merge_inspect_resume(parity_run, tmp_path, capsys):
    run_dir, _ = parity_run
    inject_failure(run_dir, 250)
    recipe = tmp_path / "recipe.yaml"
    code, out, _ = run(capsys, "plan", "--run", str(run_dir), "--failure-step", "250", "--out", str(recipe))
    assert code == 0 and "checkpoint-200" in out and "checkpoint-100" in out

    merged = tmp_path / "merged"
    code, out, _ = run(capsys, "merge", "--recipe", str(recipe), "--out", str(merged), "--json")
    assert code == 0
    report = json.loads(out)
    assert report["shard_files_read"] == 4 and report["sources"] == 2

    code, out, _ = run(capsys, "inspect", "--ckpt", str(merged), "--json")
    info = json.loads(out)
    assert info["complete"] and info["step"] == 200 and info["strategy"] == "merged"
    steps = {row["module"]: row["step"] for row in info["modules"]}
    assert steps["layers.1"] == steps["embed_tokens"] == 200
    assert steps["layers.0"] == steps["norm"] == steps["lm_head"] == 100
    assert info["payload_ratio"] == 7.0

    code, out, _ = run(capsys, "inspect", "--ckpt", str(merged))
    assert code == 0 and "layers.3" in out and "x weights file" in out

    code, out, _ = run(capsys, "resume", "--ckpt", str(merged), "--steps", "100", "--json")
    assert code == 0 and json.loads(out)["step"] == 300

    code, _, err = run(capsys, "resume", "--ckpt", str(run_dir / "checkpoint-200"), "--steps", "10")
    assert code == 1 and "MissingModules" in err


def test_merge_then_verify_against_oracle(parity_run, tmp_path, capsys):
    run_dir, _ = parity_run
    recipe = tmp_path / "r.yaml"
    run(capsys, "plan", "--run", str(run_dir), "--failure-step", "400", "--out", str(recipe))
    merged = tmp_path / "m"
    assert run(capsys, "merge", "--recipe", str(recipe), "--out", str(merged))[0] == 0

    spec = ModelSpec(4)
    a, b = str(run_dir / "checkpoint-300"), str(run_dir / "checkpoint-400")
    set_a = {ModuleId.layer(0), ModuleId.layer(2), LM_HEAD, NORM}
    mapping = {m: (a if m in set_a else b, m) for m in enumerate_modules(spec)}
    _, state = assemble_oracle(spec, mapping)
    state.t = read_checkpoint(merged).optim.t
    oracle_dir = tmp_path / "oracle"
    ts = read_meta(merged).trainer_state
    write_checkpoint(oracle_dir, spec, 400, enumerate_modules(spec), state, 2,
                     trainer_state_json(**ts), "oracle")
    code, out, _ = run(capsys, "verify", "--a", str(merged), "--b", str(oracle_dir), "--json")
    assert code == 0 and json.loads(out) == {"equal": True}

    code, out, _ = run(capsys, "verify", "--a", str(merged), "--b", a, "--modules", "layers.0,norm", "--json")
    assert code == 0
    code, out, _ = run(capsys, "verify", "--a", str(merged), "--b", a, "--modules", "layers.1", "--json")
    assert code == 1 and json.loads(out)["first_divergence"]["module"] == "layers.1"


def test_verify_geometry_mismatch(tmp_path, capsys, rng):
    a, _ = write_random_ckpt(tmp_path / "a", ModelSpec(2), rng)
    b, _ = write_random_ckpt(tmp_path / "b", ModelSpec(3), rng)
    code, _, err = run(capsys, "verify", "--a", str(a), "--b", str(b))
    assert code == 1 and "GeometryError" in err


def test_size_report_parity_vs_full(tmp_path, capsys):
    for kind in ("full", "parity"):
        assert run(capsys, "train", "--strategy", kind, "--steps", "40", "--interval", "10",
                   "--out", str(tmp_path / kind))[0] == 0
    _, out, _ = run(capsys, "size-report", "--run", str(tmp_path / "full"), "--json")
    full = json.loads(out)
    _, out, _ = run(capsys, "size-report", "--run", str(tmp_path / "parity"), "--json")
    parity = json.loads(out)
    assert full["ratio"] == 1.0
    assert parity["full_equivalent_bytes"] == full["total_bytes"]
    assert 0.49 <= parity["total_bytes"] / full["total_bytes"] <= 0.51
    code, out, _ = run(capsys, "size-report", "--run", str(tmp_path / "parity"))
    assert code == 0 and "ratio" in out


@pytest.mark.parametrize("argv", [
    ["train", "--strategy", "sometimes", "--steps", "5", "--out", "x"],
    ["train", "--steps", "5"],
    ["train", "--steps", "5", "--out", "x", "--bogus"],
    ["nosuchcommand"],
])
def test_user_errors_exit_1(argv, tmp_path, capsys, monkeypatch):
    monkeypatch.chdir(tmp_path)
    with pytest.raises(SystemExit) as info:
        code = main(argv)
        raise SystemExit(code)
    assert info.value.code == 1


def test_train_with_config_file(tmp_path, capsys):
    cfg = tmp_path / "model.yaml"
    cfg.write_text("num_layers: 3\nhidden_dim: 4\nweight_tied: true\n")
    code, out, _ = run(capsys, "train", "--config", str(cfg), "--steps", "2", "--interval", "1",
                       "--out", str(tmp_path / "run"), "--json")
    assert code == 0
    meta = json.loads((tmp_path / "run/checkpoint-2/config.json").read_text())
    assert meta["num_layers"] == 3 and meta["hidden_dim"] == 4 and meta["weight_tied"] is True
    cfg.write_text("layers: 3\n")
    assert run(capsys, "train", "--config", str(cfg), "--steps", "2", "--out", str(tmp_path / "r2"))[0] == 1


def test_plan_unrecoverable_exit_1(parity_run, tmp_path, capsys):
    run_dir, _ = parity_run
    code, _, err = run(capsys, "plan", "--run", str(run_dir), "--failure-step", "150", "--out", str(tmp_path / "r"))
    assert code == 1 and "UnrecoverableModule" in err and "embed_tokens" in err


def test_bad_recipe_exit_1(tmp_path, capsys):
    r = tmp_path / "r.yaml"
    r.write_text("slices: 3\n")
    code, _, err = run(capsys, "merge", "--recipe", str(r), "--out", str(tmp_path / "o"))
    assert code == 1 and "slices" in err
    code, _, err = run(capsys, "merge", "--recipe", str(tmp_path / "missing.yaml"), "--out", str(tmp_path / "o"))
    assert code == 1


def test_corrupt_source_is_user_error(tmp_path, capsys, rng):
    path, _ = write_random_ckpt(tmp_path, ModelSpec(2), rng)
    (path / "model.weights").write_bytes(b"\0" * 3)
    code, _, err = run(capsys, "verify", "--a", str(path), "--b", str(path))
    assert code == 1 and "CorruptContainer" in err


def test_merge_leaves_sources_untouched(tmp_path, capsys):
    spec = ModelSpec(2)
    a, _ = write_random_ckpt(tmp_path / "src", spec, np.random.default_rng(1), step=10)
    b, _ = write_random_ckpt(tmp_path / "src", spec, np.random.default_rng(2), step=20)
    before = dir_bytes(tmp_path / "src")
    r = tmp_path / "r.yaml"
    r.write_text(f"base_checkpoint: {a}\naux:\n  embed_tokens: {b}\n")
    assert run(capsys, "merge", "--recipe", str(r), "--out", str(tmp_path / "out"))[0] == 0
    assert dir_bytes(tmp_path / "src") == before


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "ckpt_tailor", "train", "--steps", "3", "--interval", "3",
                           "--layers", "2", "--out", str(tmp_path / "run"), "--json"],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["checkpoints"] == ["checkpoint-3"]
