import json
import shutil

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ckpt_tailor.container import bf16_round, decode_container
from ckpt_tailor.errors import ConsistencyError, CorruptContainer, GeometryError, MissingArtifact, StorageError
from ckpt_tailor.model import EMBED, LM_HEAD, NORM, ModelSpec, ModuleId, enumerate_modules
from ckpt_tailor.optim import AdamHyperparams, build_group_table
from ckpt_tailor.store import (
    ShardGeometry,
    checkpoint_nbytes,
    padded_length,
    read_checkpoint,
    read_meta,
    shard_group,
    size_breakdown,
    trainer_state_json,
    unshard_group,
    write_checkpoint,
)

from helpers import dir_bytes, random_state, write_random_ckpt


def test_shard_ten_over_four():
    v = np.arange(1, 11, dtype=np.float32)
    shards = shard_group(v, 4)
    assert [len(s) for s in shards] == [3, 3, 3, 3]
    np.testing.assert_array_equal(shards[3], [10, 0, 0])
    geom = ShardGeometry(4, {0: 10})
    assert (geom.padded_length(0), geom.shard_length(0)) == (12, 3)


def test_single_rank_is_identity():
    v = np.arange(7, dtype=np.float32)
    (only,) = shard_group(v, 1)
    assert only.tobytes() == v.tobytes()


def test_shard_length_mismatch():
    with pytest.raises(GeometryError):
        shard_group(np.zeros(5, np.float32), 2, true_length=6)
    with pytest.raises(GeometryError):
        ShardGeometry(0)


def test_thousand_over_seven(rng):
    v = rng.standard_normal(1000).astype(np.float32)
    assert unshard_group(shard_group(v, 7), 1000).tobytes() == v.tobytes()


@given(st.integers(0, 100_000), st.integers(1, 16), st.integers(0, 2**31))
@settings(max_examples=60, deadline=None)
def test_shard_round_trip_property(n, N, seed):
    v = np.random.default_rng(seed).standard_normal(n).astype(np.float32)
    shards = shard_group(v, N)
    assert len(shards) == N and len({len(s) for s in shards}) == 1
    assert sum(len(s) for s in shards) == padded_length(n, N)
    assert padded_length(n, N) - n < N
    assert not np.concatenate(shards)[n:].any()
    assert unshard_group(shards, n).tobytes() == v.tobytes()


def test_full_layout(tmp_path, rng):
    path, _ = write_random_ckpt(tmp_path, ModelSpec(2), rng, step=10)
    files = set(dir_bytes(path))
    assert files == {"model.weights", "optim/rank_0.shard", "optim/rank_1.shard", "optim_meta.json",
                     "config.json", "trainer_state.json", "manifest.json"}
    ts = json.loads((path / "trainer_state.json").read_text())
    assert list(ts) == sorted(ts) == ["checkpoint_counter", "lr", "optimizer_t", "rng_seed", "step", "strategy"]
    man = json.loads((path / "manifest.json").read_text())
    assert list(man) == ["modules", "step", "strategy"]
    assert path.name == "checkpoint-10"


@pytest.mark.parametrize("N", [1, 2, 4])
@pytest.mark.parametrize("L", [1, 4, 16])
def test_read_write_round_trip(tmp_path, N, L):
    spec = ModelSpec(L, weight_tied=L == 4)
    path, state = write_random_ckpt(tmp_path, spec, np.random.default_rng(L * 10 + N), num_ranks=N)
    ck = read_checkpoint(path)
    assert ck.optim.bitwise_equal(state)
    assert ck.spec == spec and ck.step == 100 and ck.geometry.num_ranks == N
    assert ck.manifest.modules == enumerate_modules(spec)


def test_weights_are_bf16_of_masters(tmp_path, rng):
    spec = ModelSpec(3)
    path, state = write_random_ckpt(tmp_path, spec, rng)
    ck = read_checkpoint(path)
    locs = build_group_table(spec).tensor_locations()
    for name, entry in ck.weights.items():
        g, off, decl = locs[name]
        n = decl.numel
        assert entry.dtype == "BF16"
        np.testing.assert_array_equal(entry.array(), bf16_round(state.groups[g].master[off:off + n]))


def test_write_is_deterministic(tmp_path):
    spec = ModelSpec(3)
    a, _ = write_random_ckpt(tmp_path / "a", spec, np.random.default_rng(9))
    b, _ = write_random_ckpt(tmp_path / "b", spec, np.random.default_rng(9))
    assert dir_bytes(a) == dir_bytes(b)


def test_refuses_overwrite_and_leaves_no_partial(tmp_path, rng):
    spec = ModelSpec(2)
    path, _ = write_random_ckpt(tmp_path, spec, rng)
    with pytest.raises(StorageError):
        write_random_ckpt(tmp_path, spec, rng)
    assert not list(tmp_path.glob("*.partial"))


def test_consistency_errors(tmp_path, rng):
    spec = ModelSpec(2)
    state = random_state(spec, rng, [NORM])
    ts = trainer_state_json(1, 1e-3, 1, "full", 1, 0)
    with pytest.raises(ConsistencyError):
        write_checkpoint(tmp_path / "x", spec, 1, [NORM, EMBED], state, 2, ts, "full")
    with pytest.raises(ConsistencyError):
        write_checkpoint(tmp_path / "x", spec, 1, [NORM], state, 2, {"step": 1}, "full")
    with pytest.raises(ConsistencyError):
        write_checkpoint(tmp_path / "x", spec, 1, [], state, 2, ts, "full")
    assert not (tmp_path / "x").exists()


def test_partial_checkpoint_reports_missing(tmp_path, rng):
    spec = ModelSpec(4)
    saved = [ModuleId.layer(0), ModuleId.layer(2), LM_HEAD, NORM]
    path, state = write_random_ckpt(tmp_path, spec, rng, modules=saved, strategy="parity")
    meta = read_meta(path)
    assert set(meta.modules) == set(saved)
    assert meta.missing_modules == [EMBED, ModuleId.layer(1), ModuleId.layer(3)]
    assert not meta.is_complete
    ck = read_checkpoint(path)
    assert sorted(ck.optim.groups) == build_group_table(spec).groups_for_modules(saved)
    assert not any(n.startswith(("layers.1.", "layers.3.", "embed")) for n in ck.weights)


@pytest.mark.parametrize("N", [1, 3, 8])
def test_optimizer_bytes_exact(tmp_path, rng, N):
    spec = ModelSpec(3)
    path, _ = write_random_ckpt(tmp_path, spec, rng, modules=[EMBED, ModuleId.layer(1)], num_ranks=N)
    table = build_group_table(spec)
    padded = sum(padded_length(table[g].element_count, N) for g in table.groups_for_modules([EMBED, ModuleId.layer(1)]))
    payload = 0
    for r in range(N):
        payload += sum(e.nbytes for e in decode_container((path / f"optim/rank_{r}.shard").read_bytes()).values())
    assert payload == 12 * padded == size_breakdown(path)["optimizer_payload"]


def test_predicted_sizes_match_disk(tmp_path, rng):
    spec = ModelSpec(5, weight_tied=True)
    mods = [ModuleId.layer(1), NORM]
    path, _ = write_random_ckpt(tmp_path, spec, rng, modules=mods, num_ranks=3, step=40, strategy="filter", counter=4)
    ts = json.loads((path / "trainer_state.json").read_text())
    predicted = checkpoint_nbytes(spec, mods, 3, 40, ts, "filter", AdamHyperparams())
    assert predicted == {k: len(v) for k, v in dir_bytes(path).items()}


def test_tampered_payload(tmp_path, rng):
    path, _ = write_random_ckpt(tmp_path, ModelSpec(2), rng)
    f = path / "optim/rank_1.shard"
    f.write_bytes(f.read_bytes()[:-4])
    with pytest.raises(CorruptContainer):
        read_checkpoint(path)


def test_nonzero_padding_detected(tmp_path, rng):
    spec = ModelSpec(1, hidden_dim=3, ffn_dim=5, vocab_size=7)
    path, _ = write_random_ckpt(tmp_path, spec, rng, num_ranks=4)
    f = path / "optim/rank_3.shard"
    blob = bytearray(f.read_bytes())
    blob[-4:] = np.float32(1.0).tobytes()
    f.write_bytes(bytes(blob))
    with pytest.raises(CorruptContainer):
        read_checkpoint(path)


def test_weight_master_disagreement(tmp_path, rng):
    spec = ModelSpec(2)
    path, state = write_random_ckpt(tmp_path, spec, rng)
    other, _ = write_random_ckpt(tmp_path / "o", spec, np.random.default_rng(77))
    shutil.copy(other / "model.weights", path / "model.weights")
    with pytest.raises(CorruptContainer):
        read_checkpoint(path)
    assert read_checkpoint(path, verify=False).optim.bitwise_equal(state)


def test_missing_files(tmp_path, rng):
    with pytest.raises(MissingArtifact):
        read_checkpoint(tmp_path / "checkpoint-5")
    path, _ = write_random_ckpt(tmp_path, ModelSpec(2), rng)
    (path / "optim/rank_1.shard").unlink()
    with pytest.raises(MissingArtifact):
        read_checkpoint(path)


def test_rank_count_disagreement(tmp_path, rng):
    spec = ModelSpec(2)
    path, _ = write_random_ckpt(tmp_path, spec, rng, num_ranks=2)
    other, _ = write_random_ckpt(tmp_path / "o", spec, rng, num_ranks=4)
    shutil.copy(other / "optim/rank_0.shard", path / "optim/rank_0.shard")
    with pytest.raises(GeometryError):
        read_checkpoint(path)
    shutil.copy(other / "optim/rank_3.shard", path / "optim/rank_3.shard")
    with pytest.raises(GeometryError):
        read_meta(path)
