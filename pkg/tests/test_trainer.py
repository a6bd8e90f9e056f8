import math

import numpy as np
import pytest
import torch

from semdepth.data import SceneConfig, generate_synthetic_scene
from semdepth.networks import NetworkConfig
from semdepth.trainer import (
    TrainConfig, Trainer, baseline_config, collate, config_from_dict, online_refine, total_loss,
    weighted_total,
)

SMALL_NET = dict(encoder_channels=(8, 8, 16, 16, 32), decoder_channels=(4, 8, 8, 16, 16),
                 pose_channels=(8, 8, 16, 16, 32), height=64, width=64)
SMALL_SCENE = SceneConfig(height=64, width=64, noise_radius=1, supersample=1)


@pytest.fixture(scope="module")
def small_scenes():
    return [generate_synthetic_scene(100 + i, SMALL_SCENE) for i in range(3)]


def _trainer(**kw):
    kw.setdefault("batch_size", 2)
    return Trainer(TrainConfig(**kw), NetworkConfig(**SMALL_NET))


def _t(x):
    return torch.tensor(x, dtype=torch.float64)


def test_weighted_total_arithmetic():
    terms = {"photometric": _t(1.0), "semantic": _t(0.5), "smoothness": _t(2.0), "ranking": _t(3.0)}
    assert abs(float(weighted_total(terms, TrainConfig())) - 1.505) < 1e-9
    zeros = {k: _t(0.0) for k in terms}
    assert float(weighted_total(zeros, TrainConfig())) == 0.0


def test_srl_off_drops_ranking_term():
    terms = {"photometric": _t(1.0), "semantic": _t(0.5), "smoothness": _t(2.0), "ranking": _t(3.0)}
    assert abs(float(weighted_total(terms, TrainConfig(use_srl=False))) - 1.502) < 1e-9


def test_non_finite_term_is_named():
    terms = {"photometric": _t(1.0), "semantic": _t(math.nan), "smoothness": _t(0.0), "ranking": _t(0.0)}
    with pytest.raises(FloatingPointError, match="semantic"):
        weighted_total(terms, TrainConfig())


def test_config_validation_and_unknown_keys():
    with pytest.raises(ValueError, match="delta_s"):
        TrainConfig(delta_s=-1)
    with pytest.raises(KeyError, match="learning_rate"):
        config_from_dict(TrainConfig, {"learning_rate": 1.0}, "train")
    assert config_from_dict(TrainConfig, {"lr": 0.5}).lr == 0.5
    assert TrainConfig.toy().batch_size == 4
    b = baseline_config(TrainConfig())
    assert not b.use_ssfa and not b.use_srl and not b.automask


def test_breakdown_sums_to_total(small_scenes):
    tr = _trainer()
    batch = collate(small_scenes[:2])
    outputs, poses = tr.forward(batch)
    total, br = total_loss(batch, outputs, poses, tr.samples_for(batch), tr.cfg, tr.net_cfg)
    expect = (br["photometric"] + br["semantic"] + tr.cfg.delta_s * br["smoothness"]
              + tr.cfg.delta_r * br["ranking"])
    assert abs(br["total"] - expect) < 1e-6
    assert br["ranking"] > 0


def test_baseline_objective_structure(small_scenes):
    tr = _trainer(use_ssfa=False, use_srl=False)
    batch = collate(small_scenes[:2])
    outputs, poses = tr.forward(batch)
    total, br = total_loss(batch, outputs, poses, tr.samples_for(batch), tr.cfg, tr.net_cfg)
    assert br["ranking"] == 0.0
    assert abs(br["total"] - (br["photometric"] + br["semantic"] + 1e-3 * br["smoothness"])) < 1e-6
    assert not tr.model.depth_decoder.use_ssfa


def test_zero_lr_leaves_parameters_unchanged(small_scenes):
    tr = _trainer(lr=0.0)
    before = [p.detach().clone() for p in tr.parameters()]
    tr.train_step(collate(small_scenes[:2]))
    # batch-norm running statistics are buffers, not parameters, and may move
    assert all(torch.equal(a, b) for a, b in zip(before, tr.parameters()))


def test_training_is_deterministic(small_scenes):
    a, b = _trainer(seed=3), _trainer(seed=3)
    for tr in (a, b):
        for _ in range(2):
            tr.train_step(collate(small_scenes[:2]))
    assert a.param_hash() == b.param_hash()


def test_overfit_one_batch():
    scene = generate_synthetic_scene(5, SMALL_SCENE)
    tr = _trainer(lr=1e-3)
    batch = collate([scene])
    first = tr.train_step(batch)["total"]
    for _ in range(199):
        last = tr.train_step(batch)["total"]
    assert last < first


def test_checkpoint_resume_is_bit_identical(tmp_path, small_scenes):
    tr = _trainer(seed=1)
    batch = collate(small_scenes[:2])
    tr.train_step(batch)
    path = tr.save_checkpoint(tmp_path / "ck.pt")
    tr.train_step(batch)
    resumed = Trainer.from_checkpoint(path)
    resumed.train_step(batch)
    assert resumed.param_hash() == tr.param_hash()
    assert resumed.step == tr.step == 2


def test_missing_checkpoint_message(tmp_path):
    with pytest.raises(FileNotFoundError, match="checkpoint not found"):
        Trainer.from_checkpoint(tmp_path / "nope.pt")


def test_fit_writes_run_directory(tmp_path, small_scenes):
    tr = Trainer(TrainConfig(batch_size=2, epochs=1, overlay_every=1), NetworkConfig(**SMALL_NET),
                 run_dir=tmp_path / "run")
    tr.fit(small_scenes)
    run = tmp_path / "run"
    assert (run / "config.json").exists()
    assert (run / "checkpoints" / "epoch001.pt").exists()
    assert (run / "overlays" / "epoch001.png").exists()
    lines = (run / "losses.csv").read_text().strip().splitlines()
    assert lines[0].startswith("step,epoch,lr,total") and len(lines) == 3


def test_lr_schedule_divides_by_ten():
    tr = _trainer(lr=1e-4, lr_decay_epochs=2)
    for _ in range(2):
        tr.scheduler.step()
    assert tr.optimizer.param_groups[0]["lr"] == pytest.approx(1e-5)


def test_refine_zero_iterations_matches_inference(small_scenes):
    tr = _trainer()
    s = small_scenes[0]
    np.testing.assert_array_equal(online_refine(tr, s, iterations=0), tr.predict_depth(s))


def test_refine_leaves_base_untouched(small_scenes):
    tr = _trainer(lr=1e-3)
    s = small_scenes[1]
    h = tr.param_hash()
    before = tr.predict_depth(s)
    refined = online_refine(tr, s, iterations=3)
    assert tr.param_hash() == h
    assert not np.array_equal(refined, before)
    np.testing.assert_array_equal(tr.predict_depth(s), before)


def test_refine_needs_sources(small_scenes):
    s = small_scenes[0]
    broken = type(s)(list(s.triplet), s.intrinsics, s.binary_label)
    broken.triplet[0] = None
    with pytest.raises(ValueError, match="source frames"):
        online_refine(_trainer(), broken, iterations=1)


def test_unlabelled_step_skips_label_terms(small_scenes):
    tr = _trainer()
    br = tr.train_step(collate(small_scenes[:1]), has_labels=False)
    assert br["semantic"] == 0.0 and br["ranking"] == 0.0


def test_unlabelled_inference_conditions_on_own_semantics(small_scenes):
    s = small_scenes[0]
    unlabelled = type(s)(s.triplet, s.intrinsics, np.zeros_like(s.binary_label), meta={"has_labels": False})
    tr = _trainer()
    depth = tr.predict_depth(unlabelled)
    assert depth.shape == s.binary_label.shape and np.isfinite(depth).all()
