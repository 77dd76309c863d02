import hashlib

import numpy as np
import pytest

from tsam import checkpoint as ck
from tsam import trainer as tr
from tsam.data import SynthConfig, synth_generate
from tsam.diffcore import Tensor
from tsam.errors import CheckpointError, CheckpointVersionError
from tsam.evaluator import evaluate
from tsam.sacl import SaclConfig


def sample_params(seed=0):
    rng = np.random.default_rng(seed)
    return {
        "alpha": Tensor(rng.normal(size=(3, 4)).astype(np.float32)),
        "beta": Tensor(rng.normal(size=7).astype(np.float32)),
        "gamma": Tensor(np.float32(2.5)),
    }


def test_round_trip_is_bit_exact(tmp_path):
    path = str(tmp_path / "model.ck")
    params = sample_params()
    ck.save(path, params, epoch=9, config_text="seed = 4\nmodel.dim = 8\n")
    loaded = ck.load(path)
    assert loaded["epoch"] == 9
    assert loaded["config_text"] == "seed = 4\nmodel.dim = 8\n"
    assert loaded["order"] == ["alpha", "beta", "gamma"]
    assert loaded["adam"] is None
    for name, t in params.items():
        got = loaded["tensors"][name]
        assert got.dtype == np.float32
        np.testing.assert_array_equal(got, t.data)


def test_config_hash_matches_sha256(tmp_path):
    path = str(tmp_path / "model.ck")
    text = "train.lr = 0.001\n"
    ck.save(path, sample_params(), epoch=1, config_text=text)
    loaded = ck.load(path)
    assert loaded["config_sha"] == hashlib.sha256(text.encode()).hexdigest()


def test_optimizer_state_round_trip(tmp_path):
    path = str(tmp_path / "model.ck")
    params = sample_params(1)
    ms = [np.full_like(p.data, 0.25) for p in params.values()]
    vs = [np.full_like(p.data, 0.5) for p in params.values()]
    ck.save(path, params, epoch=2, config_text="", adam_state=(17, ms, vs))
    step, ms2, vs2 = ck.load(path)["adam"]
    assert step == 17
    for a, b in zip(ms, ms2):
        np.testing.assert_array_equal(a, b)
    for a, b in zip(vs, vs2):
        np.testing.assert_array_equal(a, b)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "junk.ck"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(CheckpointError, match="magic"):
        ck.load(str(path))


def test_future_version_rejected(tmp_path):
    path = str(tmp_path / "model.ck")
    ck.save(path, sample_params(), epoch=1, config_text="x = 1")
    blob = bytearray(open(path, "rb").read())
    blob[4:6] = (9).to_bytes(2, "little")
    open(path, "wb").write(bytes(blob))
    with pytest.raises(CheckpointVersionError, match="version 9"):
        ck.load(str(path))


def test_corrupted_config_hash_rejected(tmp_path):
    path = str(tmp_path / "model.ck")
    ck.save(path, sample_params(), epoch=1, config_text="x = 1")
    blob = bytearray(open(path, "rb").read())
    blob[10] ^= 0xFF  # inside the stored sha256
    open(path, "wb").write(bytes(blob))
    with pytest.raises(CheckpointError, match="hash"):
        ck.load(str(path))


def test_truncated_file_rejected(tmp_path):
    path = str(tmp_path / "model.ck")
    ck.save(path, sample_params(), epoch=1, config_text="x = 1")
    blob = open(path, "rb").read()
    open(path, "wb").write(blob[:len(blob) - 10])
    with pytest.raises(CheckpointError, match="truncated"):
        ck.load(str(path))


def test_empty_file_rejected(tmp_path):
    path = tmp_path / "empty.ck"
    path.write_bytes(b"")
    with pytest.raises(CheckpointError):
        ck.load(str(path))


# ---------------------------------------------------------------------------
# restoring into a model


def tiny_train(tmp_path, seed=0):
    store, vis, txt = synth_generate(SynthConfig(
        entity_count=15, relation_count=2, triple_count=40,
        tokens_per_modality=2, token_dim=4, seed=seed))
    cfg = tr.TrainConfig(dim=8, enc_layers=1, enc_heads=2, enc_ffn=16,
                         dec_layers=1, dec_heads=2, dec_ffn=16,
                         batch_size=8, epochs=2, sacl=SaclConfig(k=4),
                         max_tokens=4, seed=seed)
    result = tr.train(store, vis, txt, cfg, log_stream=open("/dev/null", "w"))
    return store, vis, txt, cfg, result


def test_saved_model_evaluates_bit_identically(tmp_path):
    store, vis, txt, cfg, result = tiny_train(tmp_path)
    path = str(tmp_path / "model.ck")
    opt = result.model.optimizer
    ck.save(path, {n: result.model.params[n] for n in sorted(result.model.params)},
            epoch=result.best_epoch, config_text="seed = 0",
            adam_state=(opt.state.step, opt.state.m, opt.state.v))

    loaded = ck.load(path)
    fresh = tr.Model(store, vis, txt, cfg)
    ck.restore_model(fresh, loaded)

    heads = np.array([h for h, _, _ in store.test])
    rels = np.array([r for _, r, _ in store.test])
    np.testing.assert_array_equal(fresh.candidate_scores(heads, rels),
                                  result.model.candidate_scores(heads, rels))
    before = evaluate(result.model, store, "test", filtered=True)
    after = evaluate(fresh, store, "test", filtered=True)
    assert before == after


def test_restore_rejects_name_mismatch(tmp_path):
    store, vis, txt, cfg, result = tiny_train(tmp_path)
    path = str(tmp_path / "model.ck")
    trimmed = dict(result.model.params)
    trimmed.pop("dec.cls")
    ck.save(path, trimmed, epoch=1, config_text="")
    with pytest.raises(CheckpointError, match="dec.cls"):
        ck.restore_model(tr.Model(store, vis, txt, cfg), ck.load(path))


def test_restore_rejects_shape_mismatch(tmp_path):
    store, vis, txt, cfg, result = tiny_train(tmp_path)
    path = str(tmp_path / "model.ck")
    mangled = dict(result.model.params)
    mangled["dec.cls"] = Tensor(np.zeros(5, dtype=np.float32))
    ck.save(path, mangled, epoch=1, config_text="")
    with pytest.raises(CheckpointError, match="shape"):
        ck.restore_model(tr.Model(store, vis, txt, cfg), ck.load(path))


def test_rewriting_same_state_is_byte_identical(tmp_path):
    params = sample_params(2)
    a = tmp_path / "a.ck"
    b = tmp_path / "b.ck"
    ck.save(str(a), params, epoch=3, config_text="x = 1")
    ck.save(str(b), params, epoch=3, config_text="x = 1")
    assert a.read_bytes() == b.read_bytes()
