"""Shared oracles and random-scene builders for the test suite.

The oracles here are written from the underlying math and share no code with
the package: quaternion conversion, covariance projection, the SH table and the
per-pixel compositor are all re-derived.
"""

import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from geotex.core import CameraView, SplatSet

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


# ----------------------------------------------------------------- SH oracle

def _k(l, m):
    return math.sqrt((2 * l + 1) / (4 * math.pi) * math.factorial(l - abs(m))
                     / math.factorial(l + abs(m)))


def sh_table(d, degree):
    """Real SH basis with the sign convention used by 3DGS, from closed-form constants."""
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    c0 = _k(0, 0)
    c1 = _k(1, 0)                              # sqrt(3/4pi)
    out = [np.full_like(x, c0)]
    if degree >= 1:
        out += [-c1 * y, c1 * z, -c1 * x]
    if degree >= 2:
        a = 0.5 * math.sqrt(15 / math.pi)
        b = 0.25 * math.sqrt(5 / math.pi)
        c = 0.25 * math.sqrt(15 / math.pi)
        out += [a * x * y, -a * y * z, b * (2 * z * z - x * x - y * y), -a * x * z,
                c * (x * x - y * y)]
    if degree >= 3:
        p = 0.25 * math.sqrt(35 / (2 * math.pi))
        q = 0.5 * math.sqrt(105 / math.pi)
        r = 0.25 * math.sqrt(21 / (2 * math.pi))
        s = 0.25 * math.sqrt(7 / math.pi)
        t = 0.25 * math.sqrt(105 / math.pi)
        out += [-p * y * (3 * x * x - y * y), q * x * y * z, -r * y * (4 * z * z - x * x - y * y),
                s * z * (2 * z * z - 3 * x * x - 3 * y * y), -r * x * (4 * z * z - x * x - y * y),
                t * z * (x * x - y * y), -p * x * (x * x - 3 * y * y)]
    return np.stack(out, axis=-1)


# ------------------------------------------------------------ geometry oracle

def quat_matrix(q):
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [w * w + x * x - y * y - z * z, 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), w * w - x * x + y * y - z * z, 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), w * w - x * x - y * y + z * z],
    ])


def brute_render(splats, cam, bg=(0.0, 0.0, 0.0), sh_degree=None):
    """Per-pixel compositor over a single global depth order. Returns (color, index_max)."""
    deg = splats.sh_degree if sh_degree is None else sh_degree
    H, W = cam.height, cam.width
    proj = []
    for i in range(len(splats)):
        pc = cam.R @ splats.mu[i] + cam.t
        if pc[2] < 0.01:
            continue
        Rq = quat_matrix(splats.rot[i])
        S = np.diag(np.exp(splats.scale[i]))
        cov3 = Rq @ S @ S @ Rq.T
        J = np.array([[cam.fu / pc[2], 0, -cam.fu * pc[0] / pc[2] ** 2],
                      [0, cam.fv / pc[2], -cam.fv * pc[1] / pc[2] ** 2]])
        cov2 = J @ cam.R @ cov3 @ cam.R.T @ J.T + 0.3 * np.eye(2)
        if np.linalg.det(cov2) <= 0:
            continue
        m = np.array([cam.fu * pc[0] / pc[2] + cam.cu, cam.fv * pc[1] / pc[2] + cam.cv])
        d = splats.mu[i] - cam.center
        d = d / np.linalg.norm(d)
        basis = sh_table(d, deg)
        col = np.maximum(basis @ splats.sh[i, :len(basis)] + 0.5, 0.0)
        op = 1.0 / (1.0 + math.exp(-splats.opacity[i]))
        proj.append((pc[2], i, m, np.linalg.inv(cov2), op, col))
    proj.sort(key=lambda p: p[0])  # stable, so equal depths keep index order
    color = np.zeros((H, W, 3))
    imax = np.full((H, W), -1, dtype=np.int64)
    for py in range(H):
        for px in range(W):
            x = np.array([px + 0.5, py + 0.5])
            T, acc, best, best_w = 1.0, np.zeros(3), -1, 0.0
            for _, i, m, conic, op, col in proj:
                dx = x - m
                power = -0.5 * (conic[0, 0] * dx[0] ** 2 + conic[1, 1] * dx[1] ** 2) \
                    - conic[0, 1] * dx[0] * dx[1]
                if power < -4.5:
                    continue
                w = min(0.99, op * math.exp(power))
                if T * (1 - w) < 1e-4:
                    break
                acc += col * w * T
                if w > best_w:
                    best, best_w = i, w
                T *= 1 - w
            color[py, px] = acc + T * np.asarray(bg)
            imax[py, px] = best
    return color, imax


# -------------------------------------------------------------- random data

def random_quat(rng, n=None):
    q = rng.standard_normal((4,) if n is None else (n, 4))
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def look_camera(eye, target, width=32, height=32, f=30.0):
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    x = np.cross(fwd, [0.0, 0.0, 1.0])
    x /= np.linalg.norm(x)
    y = np.cross(fwd, x)
    R = np.stack([x, y, fwd])
    return CameraView(f, f, width / 2, height / 2, R, -R @ eye, width, height)


def random_camera(rng, width=32, height=32):
    eye = rng.uniform(-0.5, 0.5, 3) + np.array([0.0, -4.0, 0.0])
    target = rng.uniform(-0.3, 0.3, 3)
    return look_camera(eye, target, width, height, f=rng.uniform(25, 40))


def random_splats(rng, n, sh_degree=None, spread=1.0):
    deg = int(rng.integers(0, 4)) if sh_degree is None else sh_degree
    k = (deg + 1) ** 2
    sh = rng.normal(0, 0.3, (n, k, 3))
    sh[:, 0] = rng.normal(0, 0.8, (n, 3))
    return SplatSet(
        mu=rng.uniform(-spread, spread, (n, 3)),
        rot=random_quat(rng, n),
        scale=np.log(rng.uniform(0.05, 0.4, (n, 3))),
        opacity=rng.uniform(-2.0, 3.0, n),
        sh=sh,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ------------------------------------------------------------ finite differences

PARAM_STEPS = {"mu": 1e-6, "rot": 1e-6, "scale": 1e-6, "opacity": 1e-6, "sh": 1e-6}


def fd_gradients(splats, cam, weights, bg=None, sh_degree=None, fields=PARAM_STEPS):
    """Central differences of sum(weights * render) for every parameter entry."""
    from geotex.rasterizer import render

    out = {}
    for name, h in fields.items():
        arr = getattr(splats, name)
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gf = g.reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + h
            up = np.sum(weights * render(splats, cam, bg=bg, sh_degree=sh_degree).color)
            flat[k] = old - h
            down = np.sum(weights * render(splats, cam, bg=bg, sh_degree=sh_degree).color)
            flat[k] = old
            gf[k] = (up - down) / (2 * h)
        out[name] = g
    return out


def rel_error(a, b):
    """Norm-wise relative error of ``a`` against reference ``b``."""
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(b), np.linalg.norm(a))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
