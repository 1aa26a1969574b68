import json
import struct

import numpy as np
import pytest

from disengnn.data import load_dataset, preprocess, synth_generate, threshold_for_last_fraction
from disengnn.evaluation import evaluate_model
from disengnn.model import ModelConfig
from disengnn.optim import make_rng
from disengnn.train import (FORMAT_VERSION, CheckpointIntegrityError, CheckpointVersionError, TrainConfig,
                            checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint, train)

CFG = ModelConfig(d=8, K=2, T=1, L=2, lam=1.0, dropout=0.1)


@pytest.fixture(scope="module")
def small():
    recs = synth_generate(n_items=15, n_sessions=40, session_len_range=(3, 6), rng=make_rng(2, "synth"))
    return preprocess(recs, threshold_for_last_fraction(recs, 0.2), min_item_freq=1, valid_fraction=0.2)


def strip_time(history):
    return [{k: v for k, v in rec.items() if k != "wall_time"} for rec in history]


def test_identically_seeded_runs_give_identical_logs(small, tmp_path):
    tc = TrainConfig(epochs=3, batch_size=8, seed=5)
    a = train(CFG, tc, small, log_path=tmp_path / "a.jsonl")
    b = train(CFG, tc, small, log_path=tmp_path / "b.jsonl")
    assert strip_time(a.history) == strip_time(b.history)
    read = lambda p: strip_time([json.loads(line) for line in p.read_text().splitlines()])
    assert read(tmp_path / "a.jsonl") == read(tmp_path / "b.jsonl") == strip_time(a.history)
    c = train(CFG, TrainConfig(epochs=3, batch_size=8, seed=6), small)
    assert strip_time(c.history) != strip_time(a.history)


def test_log_records_have_expected_fields(small):
    rec = train(CFG, TrainConfig(epochs=1, batch_size=8), small).history[0]
    assert set(rec) == {"epoch", "lr", "train_loss", "ce_loss", "dec_loss", "valid_P@20", "valid_MRR@20",
                        "best_valid_MRR@20", "wall_time"}
    assert rec["train_loss"] == pytest.approx(rec["ce_loss"] + CFG.lam * rec["dec_loss"], rel=1e-5)


def test_lambda_zero_removes_regulariser_from_total(small):
    cfg = ModelConfig(d=8, K=2, T=1, L=1, lam=0.0, dropout=0.0)
    rec = train(cfg, TrainConfig(epochs=1, batch_size=8), small).history[0]
    assert rec["dec_loss"] > 0
    assert rec["train_loss"] == pytest.approx(rec["ce_loss"], rel=1e-6)


def test_checkpoint_round_trip_is_byte_identical(small, tmp_path):
    res = train(CFG, TrainConfig(epochs=2, batch_size=8), small)
    blob = checkpoint_bytes(res.last)
    save_checkpoint(res.last, tmp_path / "c.ckpt")
    assert (tmp_path / "c.ckpt").read_bytes() == blob
    again = load_checkpoint(tmp_path / "c.ckpt")
    assert checkpoint_bytes(again) == blob
    assert again.vocab == small.vocab and again.epoch == 1
    for name, t in res.last.params.items():
        assert np.array_equal(again.params[name].data, t.data)
        assert np.array_equal(again.optimizer.m[name], res.last.optimizer.m[name])


def test_checkpoint_layout(small):
    res = train(CFG, TrainConfig(epochs=1, batch_size=8), small)
    blob = checkpoint_bytes(res.last)
    assert blob[:8] == b"DGNNCKPT"
    version, hlen = struct.unpack_from("<IQ", blob, 8)
    assert version == FORMAT_VERSION
    header = json.loads(blob[20:20 + hlen])
    names = [t["name"] for t in header["tensors"]]
    assert "embedding" in names and "adam.m/embedding" in names and "adam.v/W_3" in names
    assert header["model_config"]["K"] == 2


def test_corrupt_truncated_and_foreign_checkpoints_are_rejected(small):
    blob = checkpoint_bytes(train(CFG, TrainConfig(epochs=1, batch_size=8), small).last)
    with pytest.raises(CheckpointIntegrityError):
        checkpoint_from_bytes(blob[:-10])
    with pytest.raises(CheckpointIntegrityError):
        checkpoint_from_bytes(blob[:5])
    flipped = bytearray(blob)
    flipped[len(blob) // 2] ^= 0xFF
    with pytest.raises(CheckpointIntegrityError):
        checkpoint_from_bytes(bytes(flipped))
    with pytest.raises(CheckpointIntegrityError):
        checkpoint_from_bytes(b"PK\x03\x04" + blob[4:])
    future = bytearray(blob)
    struct.pack_into("<I", future, 8, FORMAT_VERSION + 1)
    with pytest.raises(CheckpointVersionError):
        checkpoint_from_bytes(bytes(future))


def test_resume_matches_uninterrupted_run(small, tmp_path):
    tc = TrainConfig(epochs=4, batch_size=8, seed=3, patience=10)
    full = train(CFG, tc, small)
    part = TrainConfig(epochs=2, batch_size=8, seed=3, patience=10, checkpoint_dir=str(tmp_path))
    train(CFG, part, small)
    resumed = train(CFG, tc, small, resume=load_checkpoint(tmp_path / "last.ckpt"),
                    resume_best=load_checkpoint(tmp_path / "best.ckpt"))
    assert [r["epoch"] for r in resumed.history] == [2, 3]
    assert strip_time(resumed.history) == strip_time(full.history[2:])
    assert checkpoint_bytes(resumed.last) == checkpoint_bytes(full.last)
    assert checkpoint_bytes(resumed.best) == checkpoint_bytes(full.best)


def test_resume_rejects_other_vocabulary(small, tmp_path):
    res = train(CFG, TrainConfig(epochs=1, batch_size=8), small)
    res.last.vocab = list(reversed(res.last.vocab))
    with pytest.raises(ValueError, match="vocabulary"):
        train(CFG, TrainConfig(epochs=2, batch_size=8), small, resume=res.last)


def test_best_checkpoint_tracks_validation_mrr(small, tmp_path):
    res = train(CFG, TrainConfig(epochs=4, batch_size=8, patience=10, checkpoint_dir=str(tmp_path)), small)
    mrrs = [r["valid_MRR@20"] for r in res.history]
    best_epoch = int(np.argmax(mrrs))  # argmax returns the first maximum: ties keep the earlier epoch
    assert res.best.epoch == best_epoch
    assert load_checkpoint(tmp_path / "best.ckpt").epoch == best_epoch
    assert evaluate_model(CFG, res.best.params, small.valid_pairs).mrr == pytest.approx(mrrs[best_epoch])


def test_early_stopping_respects_patience(small):
    res = train(CFG, TrainConfig(epochs=30, batch_size=8, patience=1, base_lr=1e-6), small)
    assert len(res.history) < 30
    last = res.history[-1]
    assert last["valid_MRR@20"] <= last["best_valid_MRR@20"]


def test_unwritable_checkpoint_dir_fails_before_training(small, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        train(CFG, TrainConfig(epochs=1, checkpoint_dir=str(blocker / "sub")), small)


def test_invalid_train_config():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0).validate()
    with pytest.raises(ValueError):
        TrainConfig(base_lr=-1).validate()


def test_overfit_micro_dataset(fixtures):
    ds = load_dataset(fixtures / "overfit")
    cfg = ModelConfig(d=16, K=2, T=1, L=1, lam=0.0, dropout=0.0)
    res = train(cfg, TrainConfig(epochs=100, batch_size=10, base_lr=0.01, decay_every=1000), ds)
    assert evaluate_model(cfg, res.last.params, ds.train_pairs, k=1).precision >= 0.95
