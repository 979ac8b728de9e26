import math

import numpy as np
import pytest
import torch

from stlidar import trainer as trainer_mod
from stlidar.data import load_checkpoint, save_checkpoint
from stlidar.fields import FieldConfig
from stlidar.refine import RefinerConfig
from stlidar.trainer import (
    LossWeights,
    TrainConfig,
    TrainingDiverged,
    depth_loss,
    flow_clouds,
    intensity_loss,
    load_model,
    parameter_digest,
    predict,
    raydrop_loss,
    refine_stage,
    total_loss,
    train,
)

TINY_FIELD = dict(planar_levels=1, planar_base_resolution=8, planar_features=4, hash_levels=2, hash_features=2,
                  log2_table_size=10, hash_min_resolution=8, hash_max_resolution=16, time_resolution=5,
                  flow_layers=3, flow_hidden=16, flow_bands=3, view_bands=3, trunk_hidden=16, geo_features=4,
                  head_hidden=16, n_samples=16)


def tiny_config(**kw):
    cfg = TrainConfig(iterations=30, rays_per_batch=32, flow_points=128, refine_epochs=5, log_every=10,
                      field=FieldConfig(**TINY_FIELD), refiner=RefinerConfig((4, 8), 1))
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg


def test_loss_examples():
    pred = torch.tensor([1.0, 2.0, 3.0])
    gt = torch.tensor([1.5, 2.0, 0.0])
    mask = torch.tensor([True, True, False])
    assert float(depth_loss(pred, gt, mask)) == 0.25
    assert float(intensity_loss(pred, gt, mask)) == 0.125
    assert float(raydrop_loss(torch.tensor([0.9, 0.2]), torch.tensor([True, False]))) == pytest.approx(0.025)


def test_loss_with_no_valid_rays_is_zero(caplog):
    out = depth_loss(torch.ones(3), torch.zeros(3), torch.zeros(3, dtype=torch.bool))
    assert float(out) == 0.0
    assert "no valid rays" in caplog.text


def test_total_loss_weights():
    parts = {"depth": torch.tensor(1.0), "intensity": torch.tensor(2.0), "raydrop": torch.tensor(3.0),
             "flow": torch.tensor(4.0)}
    assert float(total_loss(parts, LossWeights())) == pytest.approx(1 + 0.2 + 0.03 + 0.04)
    assert float(total_loss({"refine": torch.tensor(0.5)}, LossWeights.stage2())) == 0.5
    assert LossWeights.stage1().refine == 0.0
    with pytest.raises(ValueError):
        LossWeights(depth=-1)


def test_config_defaults_and_presets():
    cfg = TrainConfig.preset("paper")
    assert (cfg.iterations, cfg.rays_per_batch, cfg.lr_grids, cfg.lr_mlps, cfg.lr_final_factor) == (
        30000, 1024, 0.01, 0.001, 0.1)
    assert cfg.refine_epochs == 300 and cfg.field.n_samples == 768
    desk = TrainConfig.preset("desk", seed=3)
    assert desk.iterations == 2000 and desk.seed == 3
    with pytest.raises(ValueError):
        TrainConfig.preset("huge")
    with pytest.raises(ValueError):
        TrainConfig.preset("desk", no_such_option=1)
    with pytest.raises(ValueError):
        TrainConfig(iterations=0)


def test_config_dict_round_trip():
    cfg = TrainConfig.preset("desk", seed=9)
    back = TrainConfig.from_dict(cfg.to_dict())
    assert back == cfg


def test_flow_clouds_normalized_and_subsampled(tiny_scene):
    ds, _ = tiny_scene
    clouds = flow_clouds(ds, tiny_config(flow_points=50), np.random.default_rng(0))
    assert set(clouds) <= set(ds.train_indices)
    for c in clouds.values():
        assert c.shape[1] == 3 and len(c) <= 50
        assert float(c.abs().max()) <= 1.0 + 1e-9


@pytest.fixture(scope="module")
def tiny_run(tiny_scene):
    ds, _ = tiny_scene
    return train(ds, tiny_config())


def test_train_history_and_schedule(tiny_run):
    h = tiny_run.history
    assert len(h["depth"]) == 30 and all(math.isfinite(v) for v in h["total"])
    assert any(v > 0 for v in h["flow"])
    for lr, base in zip(h["final_lr"], (0.01, 0.001)):
        assert lr == pytest.approx(0.1 * base, rel=1e-9)


def test_train_deterministic(tiny_scene, tiny_run):
    ds, _ = tiny_scene
    again = train(ds, tiny_config())
    assert parameter_digest(again.model) == parameter_digest(tiny_run.model)


def test_train_seed_changes_result(tiny_scene, tiny_run):
    ds, _ = tiny_scene
    other = train(ds, tiny_config(seed=1, iterations=2))
    assert parameter_digest(other.model) != parameter_digest(tiny_run.model)


def test_static_configuration_has_no_flow(tiny_scene):
    ds, _ = tiny_scene
    cfg = tiny_config(iterations=3)
    cfg.field.dynamic = False
    res = train(ds, cfg)
    assert res.model.flow is None and all(v == 0.0 for v in res.history["flow"])


def test_divergence_raises(tiny_scene, monkeypatch):
    ds, _ = tiny_scene
    monkeypatch.setattr(trainer_mod, "depth_loss", lambda *a: torch.tensor(float("nan")))
    with pytest.raises(TrainingDiverged) as exc:
        train(ds, tiny_config(iterations=3))
    assert exc.value.state["iteration"] == 0


def test_checkpoint_load_reproduces_model(tiny_run, tmp_path):
    save_checkpoint(tiny_run.checkpoint, tmp_path / "c")
    model, refiner = load_model(load_checkpoint(tmp_path / "c"))
    assert refiner is None
    assert parameter_digest(model) == parameter_digest(tiny_run.model)


def test_refine_stage_freezes_field(tiny_scene, tiny_run):
    ds, _ = tiny_scene
    before = parameter_digest(tiny_run.model)
    res = refine_stage(tiny_run.model, tiny_run.checkpoint, ds, tiny_config(refine_epochs=20))
    assert parameter_digest(tiny_run.model) == before
    assert all(p.requires_grad for p in tiny_run.model.parameters())
    assert len(res.bce) == 21 and res.bce[-1] < res.bce[0]
    assert res.checkpoint.refiner_state is not None and tiny_run.checkpoint.refiner_state is None


def test_predict_outputs(tiny_scene, tiny_run):
    ds, _ = tiny_scene
    f = ds.frames[3]
    t = float(ds.scale.time_to_unit(f.timestamp))
    p = predict(tiny_run.model, None, ds.config, f.pose, t, ds.scale)
    assert p.scan.depth.shape == ds.config.shape
    assert np.all(p.scan.depth[~p.scan.mask] == 0)
    assert np.all((p.prob >= 0) & (p.prob <= 1))
