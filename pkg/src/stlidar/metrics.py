"""Point-cloud and range-view metrics.

Point-cloud metrics: chamfer distance (squared metres) and F-score at a
distance threshold. Range-view metrics per channel: RMSE, median absolute
error, PSNR and SSIM.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.spatial import cKDTree

from .sensor import PointCloud, RangeScan, SensorConfig, range_to_pointcloud

PSNR_CAP = 100.0


def _points(pc) -> np.ndarray:
    pts = pc.points if isinstance(pc, PointCloud) else pc
    pts = np.asarray(pts, np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("metric needs non-empty point clouds")
    return pts


def nn_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean distance from each point of ``a`` to its nearest point in ``b``."""
    d, _ = cKDTree(b).query(a, k=1)
    return d


def chamfer_distance(pred, gt) -> float:
    """Symmetric chamfer distance with squared distances, each direction
    averaged over its own cloud."""
    p, g = _points(pred), _points(gt)
    return float(np.mean(nn_dists(p, g) ** 2) + np.mean(nn_dists(g, p) ** 2))


def fscore(pred, gt, tau: float = 0.05) -> float:
    """Harmonic mean of precision and recall of matches closer than ``tau``."""
    p, g = _points(pred), _points(gt)
    precision = float(np.mean(nn_dists(p, g) < tau))
    recall = float(np.mean(nn_dists(g, p) < tau))
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def ssim(a: np.ndarray, b: np.ndarray, data_range: float, sigma: float = 1.5, radius: int = 5) -> float:
    """Mean local SSIM with an 11x11 Gaussian window (``radius`` 5).

    Windows are truncated at image borders by reflecting the image.
    """
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    trunc = radius / sigma

    def filt(x):
        return gaussian_filter(x, sigma, mode="reflect", truncate=trunc)

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def psnr(rmse: float, data_range: float) -> float:
    if rmse < data_range * 1e-5:
        return PSNR_CAP
    return min(PSNR_CAP, 20.0 * math.log10(data_range / rmse))


def image_metrics(pred, gt, data_range: float) -> tuple[float, float, float, float]:
    """``(rmse, medae, psnr, ssim)`` of two aligned images."""
    p = np.asarray(pred, np.float64)
    g = np.asarray(gt, np.float64)
    if p.shape != g.shape:
        raise ValueError(f"image shapes differ: {p.shape} vs {g.shape}")
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    err = p - g
    rmse = float(np.sqrt(np.mean(err**2)))
    medae = float(np.median(np.abs(err)))
    return rmse, medae, psnr(rmse, data_range), ssim(p, g, data_range)


REPORT_KEYS = (
    "cd",
    "fscore",
    "depth_rmse",
    "depth_medae",
    "depth_psnr",
    "depth_ssim",
    "intensity_rmse",
    "intensity_medae",
    "intensity_psnr",
    "intensity_ssim",
)


@dataclass
class MetricsReport:
    cd: float
    fscore: float
    depth_rmse: float
    depth_medae: float
    depth_psnr: float
    depth_ssim: float
    intensity_rmse: float
    intensity_medae: float
    intensity_psnr: float
    intensity_ssim: float

    def items(self):
        return [(k, getattr(self, k)) for k in REPORT_KEYS]

    def to_text(self) -> str:
        """One ``key value`` pair per line, fixed key order."""
        return "".join(f"{k} {v:.6f}\n" for k, v in self.items())

    @classmethod
    def mean(cls, reports) -> "MetricsReport":
        reports = list(reports)
        return cls(*[float(np.mean([getattr(r, k) for r in reports])) for k in REPORT_KEYS])


def evaluate_frame(
    pred: RangeScan,
    gt: RangeScan,
    config: SensorConfig,
    gt_mask: bool = False,
    pred_dense: Optional[tuple] = None,
    fscore_tau: float = 0.05,
    depth_range: Optional[float] = None,
) -> MetricsReport:
    """Compare a predicted scan against ground truth.

    Point-cloud metrics use each scan's own mask. Image metrics compare the
    full range views with dropped pixels at 0. With ``gt_mask`` the
    ground-truth mask replaces the predicted one: the prediction is read on
    the ground-truth valid pixels, from ``pred_dense`` (depth and intensity
    images before binarisation) when given. Depth PSNR and SSIM use
    ``depth_range`` (default: the sensor's max range); intensity uses 1.
    """
    if pred.depth.shape != gt.depth.shape:
        raise ValueError(f"scan shapes differ: {pred.depth.shape} vs {gt.depth.shape}")
    drange = depth_range or config.max_range_m
    pc_pred = range_to_pointcloud(pred, config)
    pc_gt = range_to_pointcloud(gt, config)
    n_pred, n_gt = len(pc_pred.points), len(pc_gt.points)
    if n_pred and n_gt:
        cd = chamfer_distance(pc_pred, pc_gt)
        fs = fscore(pc_pred, pc_gt, fscore_tau)
    else:
        # an empty cloud only matches another empty cloud
        cd = 0.0 if n_pred == n_gt else float("inf")
        fs = 1.0 if n_pred == n_gt else 0.0
    if gt_mask:
        dense_d, dense_i = pred_dense if pred_dense is not None else (pred.depth, pred.intensity)
        m = gt.mask
        pd, pi = np.where(m, dense_d, 0), np.where(m, dense_i, 0)
        gd, gi = np.where(m, gt.depth, 0), np.where(m, gt.intensity, 0)
    else:
        pd, pi, gd, gi = pred.depth, pred.intensity, gt.depth, gt.intensity
    d = image_metrics(pd, gd, drange)
    i = image_metrics(pi, gi, 1.0)
    return MetricsReport(cd, fs, *d, *i)
