import json

import numpy as np
import pytest
import torch

from conftest import SMALL, read_jsonl
from objclust.config import load_config
from objclust.datasets import SceneDataset
from objclust.exceptions import CheckpointIntegrityError, CheckpointVersionError, NumericalAbort
from objclust.trainer import (batch_indices, build_state, load_model, read_metrics, resume,
                              save_checkpoint, smooth, train)


@pytest.fixture(scope="module")
def train_set(small_data):
    return SceneDataset.from_manifest(small_data, "train")


def cfg(*extra):
    return load_config(None, SMALL + list(extra))


def test_batch_indices_cover_each_epoch():
    n, B = 10, 4
    seen = np.concatenate([batch_indices(s, B, n, 0) for s in range(5)])
    assert sorted(seen[:10]) == list(range(10)) and sorted(seen[10:20]) == list(range(10))
    assert np.array_equal(batch_indices(3, B, n, 0), batch_indices(3, B, n, 0))
    assert not np.array_equal(batch_indices(0, B, n, 0), batch_indices(0, B, n, 1))


def test_smooth():
    assert smooth([1, 2, 3, 4], window=2).tolist() == [1.0, 1.5, 2.5, 3.5]
    assert smooth([5.0], window=10).tolist() == [5.0]


def test_run_outputs(trained_run):
    rows = read_metrics(trained_run / "metrics.jsonl")
    assert [r["step"] for r in rows] == list(range(10, 201, 10))
    for key in ("recon", "overlap", "pres", "where", "depth", "cat", "what", "total",
                "pres_prior", "alpha_overlap", "lr"):
        assert all(np.isfinite(r[key]) for r in rows), key
    assert (trained_run / "ckpt_100.pt").is_file() and (trained_run / "ckpt_200.pt").is_file()
    assert load_config(trained_run / "config.yaml") == cfg("train.num_steps=200")
    report = json.loads((trained_run / "report.json").read_text())
    assert report["step"] == 200


def test_recon_decreases_early(trained_run):
    recon = [r["recon"] for r in read_metrics(trained_run / "metrics.jsonl")]
    assert np.mean(recon[-5:]) < np.mean(recon[:5])


def test_presence_prior_starts_at_one(train_set, tmp_path):
    train(cfg("train.num_steps=1", "train.log_every=1"), train_set, tmp_path)
    assert read_jsonl(tmp_path / "metrics.jsonl")[0]["pres_prior"] == 1.0


def test_resume_matches_uninterrupted(train_set, tmp_path):
    full = train(cfg("train.num_steps=30", "train.log_every=1", "train.ckpt_every=20"),
                 train_set, tmp_path / "full")
    state = resume(tmp_path / "full" / "ckpt_20.pt")
    assert state.step == 20
    part = tmp_path / "part"
    part.mkdir()
    train(state.config, train_set, part, state=state)
    a = read_jsonl(tmp_path / "full" / "metrics.jsonl")[20:]
    b = read_jsonl(part / "metrics.jsonl")
    assert [r["step"] for r in b] == list(range(21, 31))
    for ra, rb in zip(a, b):
        for k in ("recon", "total", "what"):
            assert rb[k] == pytest.approx(ra[k], rel=1e-5, abs=1e-5)
    for p, q in zip(full.model.parameters(), state.model.parameters()):
        assert torch.allclose(p, q, atol=1e-5)


def test_resume_restores_everything(train_set, tmp_path):
    state = train(cfg("train.num_steps=3"), train_set, tmp_path)
    again = resume(tmp_path / "ckpt_3.pt")
    assert again.config == state.config and again.step == 3
    assert torch.equal(again.generator.get_state(), state.generator.get_state())
    for p, q in zip(state.model.state_dict().values(), again.model.state_dict().values()):
        assert torch.equal(p, q)
    assert again.optimizer.state_dict()["state"].keys() == state.optimizer.state_dict()["state"].keys()
    assert not load_model(tmp_path / "ckpt_3.pt").training


def test_checkpoint_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        resume(tmp_path / "nope.pt")
    junk = tmp_path / "junk.pt"
    junk.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointIntegrityError):
        resume(junk)

    state = build_state(cfg())
    good = save_checkpoint(state, tmp_path / "good.pt")
    outer = torch.load(good, weights_only=True)
    tampered = dict(outer, payload=outer["payload"][:-1] + bytes([outer["payload"][-1] ^ 1]))
    torch.save(tampered, tmp_path / "tampered.pt")
    with pytest.raises(CheckpointIntegrityError, match="checksum"):
        resume(tmp_path / "tampered.pt")
    torch.save(dict(outer, format_version=99), tmp_path / "future.pt")
    with pytest.raises(CheckpointVersionError, match="99"):
        resume(tmp_path / "future.pt")


def test_zero_lr_multiplier_freezes_group(train_set, tmp_path):
    c = cfg("train.num_steps=5", "train.lr_mult_prior=0")
    torch.manual_seed(c.train.seed)
    before = build_state(c).model.prior.mu.detach().clone()
    state = train(c, train_set, tmp_path)
    assert torch.equal(state.model.prior.mu, before)
    moved = [g for g in state.optimizer.param_groups if g["name"] == "encoder"][0]
    assert moved["lr"] == pytest.approx(1e-4)


def test_nan_loss_aborts_with_dump(train_set, tmp_path):
    c = cfg("train.num_steps=5")
    state = build_state(c)
    with torch.no_grad():
        state.model.prior.mu.fill_(float("nan"))
    with pytest.raises(NumericalAbort) as err:
        train(c, train_set, tmp_path, state=state)
    dump = torch.load(tmp_path / "nan_step0.pt", weights_only=True)
    assert dump["step"] == 0 and dump["batch"].shape == (4, 3, 32, 32)
    assert not np.isfinite(dump["loss"]["total"])
    assert "nan_step0.pt" in str(err.value)


def test_empty_dataset_is_rejected(tmp_path):
    with pytest.raises(ValueError):
        train(cfg(), SceneDataset(np.zeros((0, 32, 32), np.uint8)), tmp_path)


def test_eval_rows_and_report(train_set, small_data, tmp_path):
    test = SceneDataset.from_manifest(small_data, "test")
    train(cfg("train.num_steps=4", "train.log_every=2", "train.eval_every=2"), train_set,
          tmp_path, eval_dataset=test)
    rows = read_jsonl(tmp_path / "metrics.jsonl")
    assert [r["step"] for r in rows] == [2, 4]
    assert all({"ap", "acc", "nmi"} <= r.keys() for r in rows)
    report = json.loads((tmp_path / "report.json").read_text())
    assert 0 <= report["ap"] <= 1


def test_read_metrics_rejects_garbage(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text('{"step": 1}\nnot json\n')
    with pytest.raises(ValueError, match=":2:"):
        read_metrics(p)
