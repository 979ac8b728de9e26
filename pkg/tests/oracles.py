"""Independent brute-force reference implementations used by the tests."""

import itertools
import math

import numpy as np

PRIMES = (1, 2654435761, 805459861)


def bilinear(plane: np.ndarray, u: float, v: float) -> np.ndarray:
    """Sample a ``(C, rows, cols)`` plane at ``u`` (cols) and ``v`` (rows) in
    ``[-1, 1]`` with corner-aligned texels, by explicit four-corner sum."""
    _, rows, cols = plane.shape
    x = (u + 1) / 2 * (cols - 1)
    y = (v + 1) / 2 * (rows - 1)
    x0 = min(int(math.floor(x)), cols - 2) if cols > 1 else 0
    y0 = min(int(math.floor(y)), rows - 2) if rows > 1 else 0
    fx, fy = x - x0, y - y0
    out = np.zeros(plane.shape[0])
    for dx, dy in itertools.product((0, 1), (0, 1)):
        w = (fx if dx else 1 - fx) * (fy if dy else 1 - fy)
        if w:
            out += w * plane[:, y0 + dy, x0 + dx]
    return out


def planar_level(static_planes, dynamic_planes, xyz, t):
    """Static and dynamic Hadamard products of one level for one point."""
    x, y, z = xyz
    s = bilinear(static_planes[0], x, y) * bilinear(static_planes[1], x, z) * bilinear(static_planes[2], y, z)
    tt = 2 * t - 1
    d = bilinear(dynamic_planes[0], x, tt) * bilinear(dynamic_planes[1], y, tt) * bilinear(dynamic_planes[2], z, tt)
    return s, d


def hash_row(cell, dims, rows):
    if math.prod(dims) <= rows:
        return cell[0] + cell[1] * dims[0] + cell[2] * dims[0] * dims[1]
    h = 0
    for c, p in zip(cell, PRIMES):
        h ^= c * p
    return h % rows


def trilinear(table: np.ndarray, dims, u) -> np.ndarray:
    """Sample a hashed grid at unit-cube coordinates ``u`` by an explicit
    eight-corner weighted sum."""
    rows = table.shape[0]
    base, frac = [], []
    for k in range(3):
        pos = u[k] * (dims[k] - 1)
        b = min(int(math.floor(pos)), dims[k] - 2)
        base.append(b)
        frac.append(pos - b)
    out = np.zeros(table.shape[1])
    for corner in itertools.product((0, 1), repeat=3):
        w = 1.0
        for k in range(3):
            w *= frac[k] if corner[k] else 1 - frac[k]
        cell = tuple(base[k] + corner[k] for k in range(3))
        out += w * table[hash_row(cell, dims, rows)]
    return out


def nearest_sq(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared distance from each point of ``a`` to its nearest point of
    ``b``, by scanning every pair (one row of pairs at a time)."""
    out = np.empty(len(a))
    for i, p in enumerate(a):
        out[i] = np.min(np.sum((b - p) ** 2, axis=1))
    return out


def chamfer(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(nearest_sq(b, a).mean() + nearest_sq(a, b).mean())


def fscore(pred, gt, tau) -> float:
    pred, gt = np.asarray(pred, float), np.asarray(gt, float)
    p = float(np.mean(np.sqrt(nearest_sq(pred, gt)) < tau))
    r = float(np.mean(np.sqrt(nearest_sq(gt, pred)) < tau))
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)
