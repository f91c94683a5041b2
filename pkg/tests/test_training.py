import math

import numpy as np
import pytest
import torch
from scipy import stats

from redundet.errors import DataError, NumericalError
from redundet.model import CONDITIONS, ArchConfig
from redundet.synthdata import GeneratorConfig, InstanceGT, generate_scene
from redundet.training import (
    TrainConfig,
    build_model,
    dense_loss,
    loss,
    rasterize_targets,
    sample_condition,
    train,
)

TINY_ARCH = ArchConfig(channels=8, scales=2, num_classes=6, stem_channels=8, head_channels=8)


@pytest.fixture(scope="module")
def tiny_scenes():
    cfg = GeneratorConfig(image_size=32, objects_min=1, objects_max=1, size_min=8, size_max=9, min_gap=1)
    return [generate_scene(cfg, seed=i, scene_id=f"t{i}") for i in range(4)]


def test_degenerate_distribution():
    rng = np.random.default_rng(0)
    assert {sample_condition(rng, (1, 0, 0)) for _ in range(200)} == {"both"}


def test_uniform_frequencies_seed_1():
    rng = np.random.default_rng(1)
    draws = [sample_condition(rng) for _ in range(30000)]
    lo, hi = stats.binom.interval(0.999, 30000, 1 / 3)
    assert (0.323, 0.343) == pytest.approx((lo / 30000, hi / 30000), abs=1.5e-3)
    for c in CONDITIONS:
        assert 0.323 <= draws.count(c) / 30000 <= 0.343


def test_chi_square_sanity():
    rng = np.random.default_rng(7)
    p = (0.5, 0.3, 0.2)
    draws = [sample_condition(rng, p) for _ in range(3000)]
    observed = [draws.count(c) for c in CONDITIONS]
    assert stats.chisquare(observed, [3000 * q for q in p]).pvalue > 0.01


def test_sampling_reproducible():
    a = [sample_condition(np.random.default_rng(3)) for _ in range(1)]
    r1, r2 = np.random.default_rng(3), np.random.default_rng(3)
    assert [sample_condition(r1) for _ in range(50)] == [sample_condition(r2) for _ in range(50)]
    assert a[0] in CONDITIONS


@pytest.mark.parametrize("bad", [(0.5, 0.5), (0.5, 0.6, -0.1), (0.2, 0.2, 0.2)])
def test_invalid_distribution(bad):
    with pytest.raises(DataError):
        sample_condition(np.random.default_rng(0), bad)


def test_perfect_predictions_zero_loss():
    cls_t = torch.tensor([[[0, 2], [1, 0]]])
    obj_t = (cls_t > 0).double()
    cls_logits = torch.nn.functional.one_hot(cls_t, 4).permute(0, 3, 1, 2).double() * 60 - 30
    obj_logits = (obj_t * 60 - 30)[:, None]
    total, _, _ = dense_loss(cls_logits, obj_logits, cls_t, obj_t)
    assert total.item() <= 1e-6


def test_uniform_class_prediction_cross_entropy():
    cls_t = torch.randint(0, 7, (2, 5, 5))
    _, ce, _ = dense_loss(torch.zeros(2, 7, 5, 5, dtype=torch.float64), torch.zeros(2, 1, 5, 5, dtype=torch.float64),
                          cls_t, torch.zeros(2, 5, 5, dtype=torch.float64))
    assert ce.item() == pytest.approx(math.log(7), abs=1e-12)


def test_loss_scalar_oracle(rng):
    k1 = 4
    cls_logits = rng.normal(size=(1, k1, 8, 8))
    obj_logits = rng.normal(size=(1, 1, 8, 8))
    cls_t = rng.integers(0, k1, size=(1, 8, 8))
    obj_t = rng.integers(0, 2, size=(1, 8, 8)).astype(float)
    ce = bce = 0.0
    for y in range(8):
        for x in range(8):
            z = cls_logits[0, :, y, x]
            ce += -(z[cls_t[0, y, x]] - math.log(sum(math.exp(v) for v in z)))
            s = 1 / (1 + math.exp(-obj_logits[0, 0, y, x]))
            t = obj_t[0, y, x]
            bce += -(t * math.log(s) + (1 - t) * math.log(1 - s))
    expected = 0.7 * ce / 64 + 1.3 * bce / 64
    total, _, _ = dense_loss(torch.as_tensor(cls_logits), torch.as_tensor(obj_logits), torch.as_tensor(cls_t),
                             torch.as_tensor(obj_t), 0.7, 1.3)
    assert total.item() == pytest.approx(expected, abs=1e-10)


def test_rasterize_targets_front_most():
    a = np.zeros((8, 8), bool)
    a[0:4, 0:4] = True
    b = np.zeros((8, 8), bool)
    b[0:4, 2:6] = True
    box = (0, 0, 3, 3)
    cls, obj = rasterize_targets([InstanceGT(1, a, box, "balanced"), InstanceGT(2, b, box, "balanced")], (8, 8), 4)
    assert cls.tolist() == [[1, 2], [0, 0]]
    assert obj.tolist() == [[1.0, 1.0], [0.0, 0.0]]


def test_loss_wrapper_matches_dense_loss(tiny_scenes):
    cfg = TrainConfig(lambda_cls=0.5)
    cls_logits = torch.zeros(2, 7, 8, 8, dtype=torch.float64)
    obj_logits = torch.zeros(2, 1, 8, 8, dtype=torch.float64)
    total, ce, bce = loss(cls_logits, obj_logits, tiny_scenes[:2], cfg)
    assert ce.item() == pytest.approx(math.log(7), abs=1e-12)
    assert bce.item() == pytest.approx(math.log(2), abs=1e-12)
    assert total.item() == pytest.approx(0.5 * math.log(7) + math.log(2), abs=1e-12)
    with pytest.raises(NumericalError):
        loss(cls_logits * float("nan"), obj_logits, tiny_scenes[:2], cfg)


def test_standard_mode_only_both(tiny_scenes):
    cfg = TrainConfig(epochs=1, batch_size=1, ensemble_mode="standard", select_best=False)
    _, log = train(build_model(TINY_ARCH), tiny_scenes[:2], [], cfg)
    assert [r["condition"] for r in log.iterations] == ["both", "both"]


def test_dynamic_sequence_matches_sampler(tiny_scenes):
    cfg = TrainConfig(epochs=3, batch_size=1, seed=9, select_best=False)
    _, log = train(build_model(TINY_ARCH), tiny_scenes, [], cfg)
    rng = np.random.default_rng(9)
    assert [r["condition"] for r in log.iterations] == [sample_condition(rng) for _ in range(12)]


def test_gradient_reaches_both_backbones(tiny_scenes):
    cfg = TrainConfig(epochs=25, batch_size=1, lr=0.01, select_best=False)
    _, log = train(build_model(TINY_ARCH), tiny_scenes, [], cfg)
    assert len(log.iterations) == 100
    assert any(r["grad_rgb"] > 0 for r in log.iterations)
    assert any(r["grad_depth"] > 0 for r in log.iterations)
    # a dropped modality's backbone still gets gradient through its constant features,
    # but rgb_only steps must reach the rgb stream
    assert all(r["grad_rgb"] > 0 for r in log.iterations[5:] if r["condition"] != "depth_only")


def test_training_deterministic_and_logged(tiny_scenes, tmp_path):
    cfg = TrainConfig(epochs=2, batch_size=2)
    m1, log1 = train(build_model(TINY_ARCH), tiny_scenes[:2], tiny_scenes[2:], cfg, tmp_path / "a")
    m2, _ = train(build_model(TINY_ARCH), tiny_scenes[:2], tiny_scenes[2:], cfg, tmp_path / "b")
    assert (tmp_path / "a" / "model.ckpt").read_bytes() == (tmp_path / "b" / "model.ckpt").read_bytes()
    lines = (tmp_path / "a" / "train_log.jsonl").read_text().splitlines()
    assert len(lines) == 2
    assert set(log1.epochs[0]["val_box_ap"]) == set(CONDITIONS)


def test_train_errors(tiny_scenes):
    with pytest.raises(DataError):
        train(build_model(TINY_ARCH), [], [], TrainConfig())
    with pytest.raises(DataError):
        train(build_model(TINY_ARCH), tiny_scenes, [], TrainConfig(ensemble_mode="bagging"))
    with pytest.raises(NumericalError):
        train(build_model(TINY_ARCH), tiny_scenes, [], TrainConfig(epochs=2, batch_size=1, lr=1e30, select_best=False))


def test_config_file(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[train]\nepochs = 3\nlr_milestones = 1, 2\nensemble_mode = standard\nselect_best = no\n")
    cfg = TrainConfig.from_file(path)
    assert cfg.epochs == 3 and cfg.lr_milestones == (1, 2) and cfg.select_best is False
    assert cfg.distribution == (1.0, 0.0, 0.0)
    path.write_text("[train]\nwarmup = 3\n")
    with pytest.raises(DataError):
        TrainConfig.from_file(path)
