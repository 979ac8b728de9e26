import math

import numpy as np
import pytest
import torch

import oracles
from stlidar.fields import FieldConfig, LidarField, render_rays
from stlidar.flow import (
    FlowNet,
    aggregate_dynamic,
    chamfer,
    flow_forward,
    flow_loss,
    neighbor_weights,
    positional_encode,
    remove_ground_ransac,
)
from stlidar.sensor import PointCloud


def test_positional_encode_zero():
    out = positional_encode(torch.zeros(3), 4)
    assert torch.equal(out, torch.tensor([0.0, 1.0] * 12))


def test_positional_encode_half_pi():
    out = positional_encode(torch.tensor([math.pi / 2], dtype=torch.float64), 1)
    torch.testing.assert_close(out, torch.tensor([1.0, 0.0], dtype=torch.float64), atol=1e-15, rtol=0)


def test_positional_encode_length_and_bounds():
    v = torch.randn(10, 4) * 50
    out = positional_encode(v, 12)
    assert out.shape == (10, 96)
    assert float(out.abs().max()) <= 1.0


def test_positional_encode_band_layout():
    x = torch.tensor([0.3, -1.1], dtype=torch.float64)
    out = positional_encode(x, 3)
    expect = []
    for comp in x.tolist():
        for k in range(3):
            expect += [math.sin(2**k * comp), math.cos(2**k * comp)]
    torch.testing.assert_close(out, torch.tensor(expect, dtype=torch.float64))


def test_flownet_zero_init():
    net = FlowNet()
    assert len([m for m in net.mlp if isinstance(m, torch.nn.Linear)]) == 8
    fwd, bwd = flow_forward(net, torch.rand(50, 3) * 2 - 1, torch.rand(50, 1))
    assert torch.all(fwd == 0) and torch.all(bwd == 0)


@pytest.mark.parametrize("t", [0.0, 0.3, 1.0])
def test_neighbor_weights_sum_to_one(t):
    tt = torch.tensor([[t]])
    wf, wb = neighbor_weights(tt, 0.1)
    centre = 1 - wf - wb
    total = centre + wf + wb
    assert float(total) == 1.0
    if t == 0.0:
        assert float(wb) == 0.0 and float(centre) == 0.75
    if t == 1.0:
        assert float(wf) == 0.0
    if t == 0.3:
        assert float(centre) == 0.5


class StubEncoder:
    """Dynamic features that depend only on time, with chosen values at three instants."""

    def __init__(self, table):
        self.table = table

    def dynamic_features(self, xyz, t):
        out = torch.zeros(len(xyz), 2, dtype=xyz.dtype)
        for key, val in self.table.items():
            hit = (t[:, 0] - key).abs() < 1e-9
            out[hit] = torch.tensor(val, dtype=xyz.dtype)
        return out


def test_aggregate_weighted_sum():
    f0, fp, fm = [1.0, 2.0], [5.0, -1.0], [3.0, 7.0]
    enc = StubEncoder({0.5: f0, 0.6: fp, 0.4: fm})
    xyz = torch.zeros(1, 3, dtype=torch.float64)
    t = torch.tensor([[0.5]], dtype=torch.float64)
    out, _ = aggregate_dynamic(xyz, t, enc, None, None, 0.1)
    expect = 0.5 * torch.tensor(f0) + 0.25 * torch.tensor(fp) + 0.25 * torch.tensor(fm)
    torch.testing.assert_close(out[0].float(), expect, atol=1e-12, rtol=0)


def test_aggregate_constant_in_time_equals_centre():
    enc = StubEncoder({0.2: [0.7, 0.1], 0.3: [0.7, 0.1], 0.1: [0.7, 0.1]})
    xyz = torch.rand(4, 3, dtype=torch.float64)
    t = torch.full((4, 1), 0.2, dtype=torch.float64)
    out, _ = aggregate_dynamic(xyz, t, enc, None, FlowNet(dtype=torch.float64), 0.1)
    assert torch.equal(out, torch.tensor([[0.7, 0.1]] * 4, dtype=torch.float64))


def test_aggregate_endpoint_redistributes():
    enc = StubEncoder({0.0: [1.0, 1.0], 0.1: [3.0, 3.0]})
    out, _ = aggregate_dynamic(torch.zeros(1, 3, dtype=torch.float64), torch.zeros(1, 1, dtype=torch.float64), enc, None, None, 0.1)
    torch.testing.assert_close(out, torch.tensor([[1.5, 1.5]], dtype=torch.float64))


def test_chamfer_examples():
    assert float(chamfer(np.zeros((3, 3)), np.zeros((3, 3)))) == 0.0
    assert float(chamfer([[0, 0, 0]], [[1, 0, 0]])) == 2.0
    assert float(chamfer([[0, 0, 0], [2, 0, 0]], [[1, 0, 0]])) == 2.0


def test_chamfer_empty_rejected():
    with pytest.raises(ValueError):
        chamfer(np.zeros((0, 3)), np.zeros((2, 3)))


def test_chamfer_matches_bruteforce_and_symmetric(rng):
    for _ in range(10):
        a = rng.normal(size=(rng.integers(1, 120), 3))
        b = rng.normal(size=(rng.integers(1, 120), 3))
        ours = float(chamfer(a, b))
        assert abs(ours - oracles.chamfer(a, b)) <= 1e-9
        assert abs(ours - float(chamfer(b, a))) <= 1e-12
        assert ours >= 0


def test_chamfer_is_differentiable():
    a = torch.tensor([[0.0, 0, 0], [2.0, 0, 0]], dtype=torch.float64, requires_grad=True)
    b = torch.tensor([[1.0, 0, 0]], dtype=torch.float64)
    chamfer(a, b).backward()
    # d/da of 0.5*((a0-1)^2 + (a1-1)^2) + min_i (b - a_i)^2 with the tie going to a0
    assert a.grad is not None and torch.isfinite(a.grad).all()


def test_flow_loss_zero_init_identity_clouds():
    net = FlowNet(dtype=torch.float64)
    s = torch.rand(30, 3, dtype=torch.float64)
    assert float(flow_loss(net, s, 0.5, s.clone(), s.clone()).detach()) == 0.0


def test_flow_loss_zero_init_offset_clouds():
    net = FlowNet(dtype=torch.float64)
    s = torch.zeros(1, 3, dtype=torch.float64)
    shifted = torch.tensor([[1.0, 0, 0]], dtype=torch.float64)
    assert float(flow_loss(net, s, 0.5, shifted, shifted).detach()) == 4.0
    assert float(flow_loss(net, s, 0.0, None, shifted).detach()) == 2.0
    assert float(flow_loss(net, s, 1.0, shifted, None).detach()) == 2.0


class OracleFlow(torch.nn.Module):
    """Stand-in flow network returning a fixed displacement."""

    def __init__(self, fwd, bwd):
        super().__init__()
        self.dummy = torch.nn.Parameter(torch.zeros(1, dtype=torch.float64))
        self.fwd = torch.tensor(fwd, dtype=torch.float64)
        self.bwd = torch.tensor(bwd, dtype=torch.float64)

    def forward(self, xyz, t):
        n = len(xyz)
        return self.fwd.expand(n, 3), self.bwd.expand(n, 3)


def test_flow_loss_oracle_flow_beats_unwarped(rng):
    box = rng.uniform(-0.1, 0.1, (200, 3))
    step = np.array([0.1, 0.0, 0.0])
    s_i = torch.tensor(box)
    s_next, s_prev = torch.tensor(box + step), torch.tensor(box - step)
    oracle = flow_loss(OracleFlow(step, -step), s_i, 0.5, s_prev, s_next)
    unwarped = flow_loss(FlowNet(dtype=torch.float64), s_i, 0.5, s_prev, s_next)
    assert float(oracle.detach()) < float(unwarped.detach())
    assert float(oracle.detach()) == pytest.approx(0.0, abs=1e-20)


def _plane_and_box(rng, n_plane=800, n_box=200):
    plane = np.column_stack([rng.uniform(-5, 5, n_plane), rng.uniform(-5, 5, n_plane), np.zeros(n_plane)])
    box = rng.uniform([1, 1, 0.5], [2, 2, 1.5], (n_box, 3))
    return PointCloud(np.vstack([plane, box]), np.zeros(n_plane + n_box)), n_plane


def test_ransac_removes_ground_keeps_box(rng):
    pc, n_plane = _plane_and_box(rng)
    res = remove_ground_ransac(pc, rng=0)
    np.testing.assert_array_equal(np.sort(res.cloud.points, 0), np.sort(pc.points[n_plane:], 0))
    np.testing.assert_allclose(np.abs(res.plane[:3]), [0, 0, 1], atol=1e-9)


def test_ransac_random_ball_keeps_points(rng):
    pts = rng.normal(size=(300, 3))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    pts *= rng.uniform(0, 1, (300, 1)) ** (1 / 3)
    res = remove_ground_ransac(PointCloud(pts, np.zeros(300)), rng=0)
    assert 0 < len(res.cloud) < 300


def test_ransac_range_limit():
    pts = np.array([[60.0, 0, 5], [10.0, 0, 5], [0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]])
    res = remove_ground_ransac(PointCloud(pts, np.zeros(6)), max_range=50.0, rng=0)
    assert len(res.cloud) == 1 and res.cloud.points[0, 0] == 10.0


def test_ransac_too_few_points():
    pc = PointCloud(np.zeros((2, 3)), np.zeros(2))
    res = remove_ground_ransac(pc)
    assert res.warning and len(res.cloud) == 2


def test_zero_flow_pipeline_matches_unwarped_aggregation():
    cfg = FieldConfig(planar_levels=1, planar_base_resolution=8, hash_levels=2, hash_min_resolution=8,
                      hash_max_resolution=16, log2_table_size=10, n_samples=16, flow_layers=3, flow_hidden=16)
    torch.manual_seed(0)
    model = LidarField(cfg, 0.1)
    with torch.no_grad():
        for p in model.grid_parameters():
            p.add_(torch.rand_like(p))
    o = torch.zeros(8, 3)
    d = torch.nn.functional.normalize(torch.randn(8, 3), dim=-1)
    near, far = torch.zeros(8), torch.ones(8)
    t = torch.full((8,), 0.4)
    with_flow = render_rays(model, o, d, near, far, t)
    model.flow, saved = None, model.flow
    without = render_rays(model, o, d, near, far, t)
    model.flow = saved
    for k in with_flow:
        assert torch.equal(with_flow[k], without[k])
