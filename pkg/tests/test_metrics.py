import math

import numpy as np
import pytest

import oracles
from stlidar.metrics import (
    REPORT_KEYS,
    MetricsReport,
    chamfer_distance,
    evaluate_frame,
    fscore,
    image_metrics,
    psnr,
    ssim,
)
from stlidar.sensor import RangeScan, SensorConfig, SensorPose


def test_chamfer_examples():
    assert chamfer_distance(np.zeros((4, 3)), np.zeros((2, 3))) == 0.0
    assert chamfer_distance([[0, 0, 0]], [[1, 0, 0]]) == 2.0
    assert chamfer_distance([[0, 0, 0], [2, 0, 0]], [[1, 0, 0]]) == 2.0


def test_fscore_examples():
    a = np.array([[0, 0, 0], [0, 0, 0.02], [5, 5, 5]], float)
    b = np.array([[0, 0, 0.01], [0, 0, 0.03]], float)
    # precision 2/3, recall 1
    assert fscore(a, b) == pytest.approx(0.8)
    assert fscore([[0, 0, 0]], [[1, 0, 0]]) == 0.0
    assert fscore([[0, 0, 0]], [[0, 0, 0]]) == 1.0


def test_empty_cloud_rejected():
    with pytest.raises(ValueError):
        chamfer_distance(np.zeros((0, 3)), np.zeros((1, 3)))


def test_metrics_match_bruteforce(rng):
    for _ in range(20):
        a = rng.normal(size=(rng.integers(1, 150), 3)) * 0.1
        b = rng.normal(size=(rng.integers(1, 150), 3)) * 0.1
        assert abs(chamfer_distance(a, b) - oracles.chamfer(a, b)) <= 1e-9
        assert abs(fscore(a, b, 0.05) - oracles.fscore(a, b, 0.05)) <= 1e-9


def test_psnr_values():
    assert psnr(1.0, 80.0) == pytest.approx(20 * math.log10(80), abs=1e-12)
    assert psnr(0.0, 1.0) == 100.0


def test_image_metrics_identity_and_offset(rng):
    img = rng.uniform(0, 80, (16, 64))
    assert image_metrics(img, img, 80.0) == (0.0, 0.0, 100.0, pytest.approx(1.0))
    rmse, medae, p, _ = image_metrics(img + 1.0, img, 80.0)
    assert rmse == pytest.approx(1.0) and medae == pytest.approx(1.0)
    assert p == pytest.approx(38.0618, abs=1e-4)
    with pytest.raises(ValueError):
        image_metrics(img, img[:, :3], 80.0)


def test_ssim_properties(rng):
    a = rng.uniform(0, 1, (16, 40))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    assert ssim(a, a, 1.0) == pytest.approx(1.0)
    s = ssim(a, b, 1.0)
    assert -1 <= s < 1
    assert s == pytest.approx(ssim(b, a, 1.0))
    assert ssim(a, 1 - a, 1.0) < s


def _scan(depth, mask):
    depth = np.asarray(depth, float)
    return RangeScan(np.where(mask, depth, 0), np.where(mask, 0.5, 0), mask, SensorPose(np.eye(4)), 0.0)


def test_evaluate_identity():
    cfg = SensorConfig(4, 16, 10.0, -10.0, 20.0)
    rng = np.random.default_rng(0)
    depth = rng.uniform(2, 15, cfg.shape)
    mask = rng.uniform(size=cfg.shape) < 0.8
    gt = _scan(depth, mask)
    rep = evaluate_frame(gt, gt, cfg)
    assert rep.cd == 0.0 and rep.fscore == 1.0
    assert rep.depth_rmse == 0.0 and rep.depth_psnr == 100.0 and rep.depth_ssim == pytest.approx(1.0)


def test_evaluate_gt_mask_protocol_ignores_predicted_mask():
    cfg = SensorConfig(4, 16, 10.0, -10.0, 20.0)
    depth = np.full(cfg.shape, 5.0)
    gt = _scan(depth, np.ones(cfg.shape, bool))
    pred = _scan(depth, np.zeros(cfg.shape, bool))
    pred.mask[0, 0] = True
    pred.depth[0, 0] = 5.0
    free = evaluate_frame(pred, gt, cfg)
    assert free.depth_medae == 5.0
    masked = evaluate_frame(pred, gt, cfg, gt_mask=True, pred_dense=(depth, np.full(cfg.shape, 0.5)))
    assert masked.depth_rmse == 0.0 and masked.intensity_rmse == 0.0


def test_evaluate_empty_prediction():
    cfg = SensorConfig(2, 8, 10.0, -10.0, 20.0)
    gt = _scan(np.full(cfg.shape, 3.0), np.ones(cfg.shape, bool))
    pred = _scan(np.zeros(cfg.shape), np.zeros(cfg.shape, bool))
    rep = evaluate_frame(pred, gt, cfg)
    assert rep.fscore == 0.0 and math.isinf(rep.cd)


def test_report_text_and_mean():
    a = MetricsReport(*range(10))
    b = MetricsReport(*range(2, 12))
    text = a.to_text().splitlines()
    assert [l.split()[0] for l in text] == list(REPORT_KEYS)
    assert text[1] == "fscore 1.000000"
    m = MetricsReport.mean([a, b])
    assert [v for _, v in m.items()] == [float(i + 1) for i in range(10)]
