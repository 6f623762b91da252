import json
import math
import time

import numpy as np
import pytest
import torch

from burstsr.config import apply_overrides, build_config, load_config
from burstsr.dataset import procedural_images, synthesize_dataset
from burstsr.errors import ConfigError, InputError, TrainingDiverged
from burstsr.model import preset_config
from burstsr.raw_pipeline import BurstConfig
from burstsr.training import TrainConfig, Trainer, lr_at_epoch


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("train_data")
    synthesize_dataset(procedural_images(8, 64, 0), root, BurstConfig(burst_size=4, scale=4, seed=0))
    return root


def _cfg(data_dir, out, **kw):
    base = dict(data_dir=str(data_dir), out_dir=str(out), val_fraction=0.0, checkpoint_every=0, lr=5e-4)
    return TrainConfig(**{**base, **kw})


def test_default_lr_schedule():
    assert [lr_at_epoch(8e-5, e, 150) for e in (0, 150, 300)] == [8e-5, 4e-5, 2e-5]
    assert lr_at_epoch(8e-5, 149, 150) == 8e-5 and lr_at_epoch(8e-5, 449, 150) == 2e-5


@pytest.mark.parametrize("epoch", range(0, 1000, 37))
def test_lr_closed_form(epoch):
    assert lr_at_epoch(1e-3, epoch, 7) == 1e-3 * 2.0 ** -(epoch // 7)


def test_trainer_halves_lr_at_epoch_boundaries(data_dir, tmp_path):
    tr = Trainer(preset_config("tiny"), _cfg(data_dir, tmp_path, halving_interval=1, epochs=2, crop=32))
    assert tr.steps_per_epoch == 4 and tr.total_steps == 8
    hist = tr.run()
    assert [h["lr"] for h in hist] == [5e-4] * 4 + [2.5e-4] * 4
    seen = sorted(i for s in range(1, 5) for i in tr.batch_indices(s))
    assert seen == list(range(8))  # one epoch visits every sample once
    lines = (tmp_path / "train.log").read_text().splitlines()
    assert lines[0].startswith("step=1 loss=") and lines[0].endswith(" lr=0.0005")
    assert (tmp_path / "last.ckpt").is_file()


def test_smoke_run_reduces_loss(data_dir, tmp_path):
    start = time.perf_counter()
    tr = Trainer(preset_config("tiny"), _cfg(data_dir, tmp_path, steps=500))
    hist = tr.run()
    elapsed = time.perf_counter() - start
    losses = [h["loss"] for h in hist]
    assert len(losses) == 500
    # single-step losses depend on the random crop, so compare the first and last 25 steps
    assert np.mean(losses[-25:]) < np.mean(losses[:25])
    assert elapsed < 30 * 60


def test_resume_reproduces_uninterrupted_run(data_dir, tmp_path):
    kw = dict(double=True, crop=32, checkpoint_every=100, keep_checkpoints=True)
    full = Trainer(preset_config("tiny"), _cfg(data_dir, tmp_path / "full", steps=200, **kw))
    ref = full.run()
    resumed = Trainer(preset_config("tiny"), _cfg(data_dir, tmp_path / "part", steps=200, **kw),
                      resume=tmp_path / "full" / "step_000100.ckpt")
    assert resumed.step == 100
    tail = resumed.run()
    assert tail[-1]["step"] == 200
    assert tail[-1]["loss"] == ref[-1]["loss"]
    assert [h["loss"] for h in tail] == [h["loss"] for h in ref[100:]]
    for a, b in zip(full.model.parameters(), resumed.model.parameters()):
        assert torch.equal(a, b)


def test_resume_rejects_other_model_config(data_dir, tmp_path):
    tr = Trainer(preset_config("tiny"), _cfg(data_dir, tmp_path, steps=1, crop=32))
    tr.run()
    with pytest.raises(ConfigError, match="channels"):
        Trainer(preset_config("tiny", channels=16), _cfg(data_dir, tmp_path / "b", steps=2),
                resume=tmp_path / "last.ckpt")


def test_nan_loss_aborts_with_dump(data_dir, tmp_path):
    tr = Trainer(preset_config("tiny"), _cfg(data_dir, tmp_path, steps=5, crop=32))
    for item in tr.train_set.items:
        item.frames[1] = float("nan")
    with pytest.raises(TrainingDiverged, match="step 1"):
        tr.run()
    dump = json.loads((tmp_path / "nan_dump.json").read_text())
    assert dump["step"] == 1 and len(dump["batch_ids"]) == 2
    assert all(i.startswith("sample_") for i in dump["batch_ids"])


def test_validation_writes_best_checkpoint(data_dir, tmp_path):
    tr = Trainer(preset_config("tiny"), _cfg(data_dir, tmp_path, steps=4, val_fraction=0.3, checkpoint_every=2,
                                             crop=32))
    assert tr.val_set is not None and len(tr.val_set) + len(tr.train_set) == 8
    tr.run()
    assert (tmp_path / "best.ckpt").is_file()
    assert "val_psnr=" in (tmp_path / "train.log").read_text()
    assert math.isfinite(tr.best_psnr)


def test_flow_pretext_runs_and_is_logged(data_dir, tmp_path):
    tr = Trainer(preset_config("tiny"), _cfg(data_dir, tmp_path, steps=1, flow_pretrain_steps=20, crop=32))
    losses = tr.pretrain_flow()
    assert len(losses) == 20 and all(math.isfinite(v) for v in losses)
    assert "flow_pretrain steps=20" in (tmp_path / "train.log").read_text()


def test_frozen_flow_is_warm_started_then_left_alone(data_dir, tmp_path):
    def trainer(out):
        return Trainer(preset_config("tiny", freeze_flow=True),
                       _cfg(data_dir, tmp_path / out, steps=3, flow_pretrain_steps=5, crop=32))

    def flow(tr):
        return [p.detach().clone() for p in tr.model.flownet.parameters()]

    warm_only, full = trainer("a"), trainer("b")
    init = flow(warm_only)
    warm_only.pretrain_flow()
    assert any(not torch.equal(a, b) for a, b in zip(init, flow(warm_only)))
    assert not any(p.requires_grad for p in warm_only.model.flownet.parameters())
    full.run()
    assert all(torch.equal(a, b) for a, b in zip(flow(warm_only), flow(full)))


def test_missing_dataset_and_bad_config(tmp_path):
    with pytest.raises(InputError):
        Trainer(preset_config("tiny"), _cfg(tmp_path / "nothing", tmp_path / "out"))
    for bad in (dict(lr=0.0), dict(halving_interval=0), dict(loss="l2"), dict(betas=(1.0, 0.9))):
        with pytest.raises(ConfigError):
            TrainConfig(**bad).validate()
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"learning_rate": 1.0})


def test_config_file_overrides_and_seed_env(tmp_path, monkeypatch):
    path = tmp_path / "run.toml"
    path.write_text('[model]\npreset = "tiny"\nburst_size = 3\n[train]\nlr = 1e-4\nseed = 2\n'
                    '[data]\nburst_size = 3\nseed = 2\n')
    run = load_config(path, ["train.steps=7", "model.use_flow_guidance=false", "eval.report=out.txt"])
    assert run.model.burst_size == 3 and run.model.use_flow_guidance is False
    assert run.train.lr == 1e-4 and run.train.steps == 7 and run.eval.report == "out.txt"
    assert run.data.burst.seed == 2 and run.train.seed == 2
    monkeypatch.setenv("BURSTSR_SEED", "11")
    run = load_config(path)
    assert run.data.burst.seed == 11 and run.train.seed == 11
    with pytest.raises(ConfigError):
        apply_overrides({}, ["steps=3"])
    with pytest.raises(ConfigError):
        build_config({"optimizer": {}})
    with pytest.raises(ConfigError):
        build_config({"data": {"colour": 1}})
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.toml")
