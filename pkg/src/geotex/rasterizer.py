"""Tile-based CPU splatting: projection, front-to-back compositing and its analytic backward pass.

Per-splat accumulators are written per tile entry (each entry belongs to one
tile) and reduced afterwards in entry order, so results do not depend on how
tiles are scheduled.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numba as nb
import numpy as np

from .core import (
    SH_C0, SH_C1, SH_C2, SH_C3, CameraView, SplatSet, build_covariance, eval_sh,
    num_sh_coeffs, sigmoid,
)

TILE = 16
NEAR = 0.01
LOWPASS = 0.3
ALPHA_MAX = 0.99
T_MIN = 1e-4
SIGMA_CUT = 3.0
POWER_CUT = -0.5 * SIGMA_CUT * SIGMA_CUT
NO_SPLAT = -1


@dataclass
class ProjectedSplat:
    mu2d: np.ndarray
    cov2d: np.ndarray
    inv_cov2d: np.ndarray
    depth: float
    radius: float
    splat_id: int


@dataclass
class RenderOutput:
    color: np.ndarray                 # (H, W, 3)
    depth: np.ndarray                 # (H, W) alpha-blended expected depth
    final_transmittance: np.ndarray   # (H, W)
    index_max: np.ndarray             # (H, W) splat id or NO_SPLAT
    per_splat_max_weight: np.ndarray  # (N,) max blend weight w*T in this view
    contribution_count: np.ndarray    # (N,) pixels where the splat is the max contributor
    weighted_area: Optional[np.ndarray]  # (N,) same, summed texture weight
    visible: np.ndarray               # (N,) bool
    view_id: int = -1
    _state: Optional[tuple] = None


@dataclass
class Gradients:
    mu: np.ndarray
    rot: np.ndarray
    scale: np.ndarray
    opacity: np.ndarray
    sh: np.ndarray
    mean2d: np.ndarray  # (N, 2) dL/d(pixel mean)

    def viewspace_norm(self, width: int, height: int) -> np.ndarray:
        """Norm of the screen-space mean gradient in NDC units (pixels scaled by W/2, H/2)."""
        g = self.mean2d * np.array([0.5 * width, 0.5 * height])
        return np.sqrt((g * g).sum(axis=1))


def project_splat(g, cam: CameraView, splat_id: int = 0) -> Optional[ProjectedSplat]:
    """Project one splat; returns None when culled."""
    t = cam.R @ np.asarray(g.mu, dtype=np.float64) + cam.t
    if t[2] < NEAR:
        return None
    tx, ty, tz = t
    J = np.array([
        [cam.fu / tz, 0.0, -cam.fu * tx / (tz * tz)],
        [0.0, cam.fv / tz, -cam.fv * ty / (tz * tz)],
    ])
    T = J @ cam.R
    cov = T @ g.covariance() @ T.T + LOWPASS * np.eye(2)
    mu2d = np.array([cam.fu * tx / tz + cam.cu, cam.fv * ty / tz + cam.cv])
    hx, hy = SIGMA_CUT * np.sqrt(cov[0, 0]), SIGMA_CUT * np.sqrt(cov[1, 1])
    x0, x1, y0, y1 = _pixel_range(mu2d[0], mu2d[1], hx, hy, cam.width, cam.height)
    if x0 > x1 or y0 > y1:
        return None
    lam = np.linalg.eigvalsh(cov)[-1]
    return ProjectedSplat(mu2d, cov, np.linalg.inv(cov), float(tz), float(SIGMA_CUT * np.sqrt(lam)),
                          splat_id)


def _pixel_range(mx, my, hx, hy, width, height):
    x0 = max(int(np.ceil(mx - hx - 0.5)), 0)
    x1 = min(int(np.floor(mx + hx - 0.5)), width - 1)
    y0 = max(int(np.ceil(my - hy - 0.5)), 0)
    y1 = min(int(np.floor(my + hy - 0.5)), height - 1)
    return x0, x1, y0, y1


# ---------------------------------------------------------------- SH kernels

@nb.njit(cache=True)
def _sh_basis(x, y, z, deg, out):
    out[0] = SH_C0
    if deg >= 1:
        out[1] = -SH_C1 * y
        out[2] = SH_C1 * z
        out[3] = -SH_C1 * x
    if deg >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out[4] = SH_C2[0] * x * y
        out[5] = SH_C2[1] * y * z
        out[6] = SH_C2[2] * (2 * zz - xx - yy)
        out[7] = SH_C2[3] * x * z
        out[8] = SH_C2[4] * (xx - yy)
    if deg >= 3:
        xx, yy, zz = x * x, y * y, z * z
        out[9] = SH_C3[0] * y * (3 * xx - yy)
        out[10] = SH_C3[1] * x * y * z
        out[11] = SH_C3[2] * y * (4 * zz - xx - yy)
        out[12] = SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        out[13] = SH_C3[4] * x * (4 * zz - xx - yy)
        out[14] = SH_C3[5] * z * (xx - yy)
        out[15] = SH_C3[6] * x * (xx - 3 * yy)


@nb.njit(cache=True)
def _sh_basis_grad(x, y, z, deg, dx, dy, dz):
    """Partial derivatives of each basis function w.r.t. the direction components."""
    dx[:] = 0.0
    dy[:] = 0.0
    dz[:] = 0.0
    if deg >= 1:
        dy[1] = -SH_C1
        dz[2] = SH_C1
        dx[3] = -SH_C1
    if deg >= 2:
        dx[4] = SH_C2[0] * y
        dy[4] = SH_C2[0] * x
        dy[5] = SH_C2[1] * z
        dz[5] = SH_C2[1] * y
        dx[6] = -2 * SH_C2[2] * x
        dy[6] = -2 * SH_C2[2] * y
        dz[6] = 4 * SH_C2[2] * z
        dx[7] = SH_C2[3] * z
        dz[7] = SH_C2[3] * x
        dx[8] = 2 * SH_C2[4] * x
        dy[8] = -2 * SH_C2[4] * y
    if deg >= 3:
        xx, yy, zz = x * x, y * y, z * z
        dx[9] = SH_C3[0] * 6 * x * y
        dy[9] = SH_C3[0] * (3 * xx - 3 * yy)
        dx[10] = SH_C3[1] * y * z
        dy[10] = SH_C3[1] * x * z
        dz[10] = SH_C3[1] * x * y
        dx[11] = SH_C3[2] * (-2 * x * y)
        dy[11] = SH_C3[2] * (4 * zz - xx - 3 * yy)
        dz[11] = SH_C3[2] * 8 * y * z
        dx[12] = SH_C3[3] * (-6 * x * z)
        dy[12] = SH_C3[3] * (-6 * y * z)
        dz[12] = SH_C3[3] * (6 * zz - 3 * xx - 3 * yy)
        dx[13] = SH_C3[4] * (4 * zz - 3 * xx - yy)
        dy[13] = SH_C3[4] * (-2 * x * y)
        dz[13] = SH_C3[4] * 8 * x * z
        dx[14] = SH_C3[5] * 2 * x * z
        dy[14] = SH_C3[5] * (-2 * y * z)
        dz[14] = SH_C3[5] * (xx - yy)
        dx[15] = SH_C3[6] * (3 * xx - 3 * yy)
        dy[15] = SH_C3[6] * (-6 * x * y)


# ------------------------------------------------------------- preprocessing

@nb.njit(cache=True)
def _quat_rot(q, Rq):
    n = np.sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3])
    w, x, y, z = q[0] / n, q[1] / n, q[2] / n, q[3] / n
    Rq[0, 0] = 1 - 2 * (y * y + z * z)
    Rq[0, 1] = 2 * (x * y - w * z)
    Rq[0, 2] = 2 * (x * z + w * y)
    Rq[1, 0] = 2 * (x * y + w * z)
    Rq[1, 1] = 1 - 2 * (x * x + z * z)
    Rq[1, 2] = 2 * (y * z - w * x)
    Rq[2, 0] = 2 * (x * z - w * y)
    Rq[2, 1] = 2 * (y * z + w * x)
    Rq[2, 2] = 1 - 2 * (x * x + y * y)


@nb.njit(cache=True)
def _cov3d(q, log_s, Sigma, M, Rq):
    _quat_rot(q, Rq)
    for i in range(3):
        for j in range(3):
            M[i, j] = Rq[i, j] * np.exp(log_s[j])
    for i in range(3):
        for j in range(3):
            acc = 0.0
            for k in range(3):
                acc += M[i, k] * M[j, k]
            Sigma[i, j] = acc


@nb.njit(cache=True)
def _preprocess(mu, rot, log_s, opac, sh, deg, R, tv, campos, fu, fv, cu, cv, width, height,
                mean2d, conic, depth, alpha, color, rect):
    """Project every splat. ``rect`` receives the inclusive pixel bbox; x0 > x1 marks culled."""
    n = mu.shape[0]
    Sigma = np.empty((3, 3))
    M = np.empty((3, 3))
    Rq = np.empty((3, 3))
    T = np.empty((2, 3))
    basis = np.empty(16)
    for s in range(n):
        rect[s, 0] = 1
        rect[s, 1] = 0
        tx = R[0, 0] * mu[s, 0] + R[0, 1] * mu[s, 1] + R[0, 2] * mu[s, 2] + tv[0]
        ty = R[1, 0] * mu[s, 0] + R[1, 1] * mu[s, 1] + R[1, 2] * mu[s, 2] + tv[1]
        tz = R[2, 0] * mu[s, 0] + R[2, 1] * mu[s, 1] + R[2, 2] * mu[s, 2] + tv[2]
        if tz < NEAR:
            continue
        j00 = fu / tz
        j02 = -fu * tx / (tz * tz)
        j11 = fv / tz
        j12 = -fv * ty / (tz * tz)
        for c in range(3):
            T[0, c] = j00 * R[0, c] + j02 * R[2, c]
            T[1, c] = j11 * R[1, c] + j12 * R[2, c]
        _cov3d(rot[s], log_s[s], Sigma, M, Rq)
        a = LOWPASS
        b = 0.0
        d = LOWPASS
        for i in range(3):
            for j in range(3):
                a += T[0, i] * Sigma[i, j] * T[0, j]
                b += T[0, i] * Sigma[i, j] * T[1, j]
                d += T[1, i] * Sigma[i, j] * T[1, j]
        det = a * d - b * b
        if det <= 0.0:
            continue
        mx = fu * tx / tz + cu
        my = fv * ty / tz + cv
        hx = SIGMA_CUT * np.sqrt(a)
        hy = SIGMA_CUT * np.sqrt(d)
        x0 = max(int(np.ceil(mx - hx - 0.5)), 0)
        x1 = min(int(np.floor(mx + hx - 0.5)), width - 1)
        y0 = max(int(np.ceil(my - hy - 0.5)), 0)
        y1 = min(int(np.floor(my + hy - 0.5)), height - 1)
        if x0 > x1 or y0 > y1:
            continue
        rect[s, 0] = x0
        rect[s, 1] = x1
        rect[s, 2] = y0
        rect[s, 3] = y1
        mean2d[s, 0] = mx
        mean2d[s, 1] = my
        conic[s, 0] = d / det
        conic[s, 1] = -b / det
        conic[s, 2] = a / det
        depth[s] = tz
        alpha[s] = 1.0 / (1.0 + np.exp(-opac[s]))
        dx = mu[s, 0] - campos[0]
        dy = mu[s, 1] - campos[1]
        dz = mu[s, 2] - campos[2]
        nrm = np.sqrt(dx * dx + dy * dy + dz * dz)
        _sh_basis(dx / nrm, dy / nrm, dz / nrm, deg, basis)
        nb_ = (deg + 1) * (deg + 1)
        for c in range(3):
            acc = 0.5
            for k in range(nb_):
                acc += basis[k] * sh[s, k, c]
            color[s, c] = acc if acc > 0.0 else 0.0


@nb.njit(cache=True)
def _bin(order, rect, tiles_x, tiles_y):
    """Tile lists in depth order. Returns (offsets, entry splat ids)."""
    n_tiles = tiles_x * tiles_y
    counts = np.zeros(n_tiles + 1, dtype=np.int64)
    for s in order:
        if rect[s, 0] > rect[s, 1]:
            continue
        for ty in range(rect[s, 2] // TILE, rect[s, 3] // TILE + 1):
            for tx in range(rect[s, 0] // TILE, rect[s, 1] // TILE + 1):
                counts[ty * tiles_x + tx + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    entries = np.empty(offsets[-1], dtype=np.int64)
    for s in order:
        if rect[s, 0] > rect[s, 1]:
            continue
        for ty in range(rect[s, 2] // TILE, rect[s, 3] // TILE + 1):
            for tx in range(rect[s, 0] // TILE, rect[s, 1] // TILE + 1):
                t = ty * tiles_x + tx
                entries[fill[t]] = s
                fill[t] += 1
    return offsets, entries


# ----------------------------------------------------------------- compositing

@nb.njit(cache=True)
def _forward(offsets, entries, mean2d, conic, alpha, color, depth, bg, width, height, tiles_x,
             out_color, out_depth, out_T, out_imax, out_last, entry_maxw):
    n_tiles = offsets.shape[0] - 1
    for t in range(n_tiles):
        x_start = (t % tiles_x) * TILE
        y_start = (t // tiles_x) * TILE
        e0 = offsets[t]
        e1 = offsets[t + 1]
        for py in range(y_start, min(y_start + TILE, height)):
            for px in range(x_start, min(x_start + TILE, width)):
                fx = px + 0.5
                fy = py + 0.5
                T = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                dd = 0.0
                best_w = 0.0
                best = NO_SPLAT
                last = e0
                for e in range(e0, e1):
                    s = entries[e]
                    dx = fx - mean2d[s, 0]
                    dy = fy - mean2d[s, 1]
                    power = -0.5 * (conic[s, 0] * dx * dx + conic[s, 2] * dy * dy) \
                        - conic[s, 1] * dx * dy
                    if power < POWER_CUT:
                        continue
                    w = alpha[s] * np.exp(power)
                    if w > ALPHA_MAX:
                        w = ALPHA_MAX
                    test_T = T * (1.0 - w)
                    if test_T < T_MIN:
                        break
                    wt = w * T
                    c0 += color[s, 0] * wt
                    c1 += color[s, 1] * wt
                    c2 += color[s, 2] * wt
                    dd += depth[s] * wt
                    if w > best_w:
                        best_w = w
                        best = s
                    if wt > entry_maxw[e]:
                        entry_maxw[e] = wt
                    T = test_T
                    last = e + 1
                out_color[py, px, 0] = c0 + T * bg[0]
                out_color[py, px, 1] = c1 + T * bg[1]
                out_color[py, px, 2] = c2 + T * bg[2]
                out_depth[py, px] = dd / (1.0 - T) if 1.0 - T > 1e-12 else 0.0
                out_T[py, px] = T
                out_imax[py, px] = best
                out_last[py, px] = last


@nb.njit(cache=True)
def _backward(offsets, entries, mean2d, conic, alpha, color, bg, width, height, tiles_x,
              out_T, out_last, dL_dC, g_mean, g_conic, g_alpha, g_color):
    n_tiles = offsets.shape[0] - 1
    for t in range(n_tiles):
        x_start = (t % tiles_x) * TILE
        y_start = (t // tiles_x) * TILE
        e0 = offsets[t]
        e1 = offsets[t + 1]
        ws = np.empty(e1 - e0)
        Ts = np.empty(e1 - e0)
        gs = np.empty(e1 - e0)
        es = np.empty(e1 - e0, dtype=np.int64)
        for py in range(y_start, min(y_start + TILE, height)):
            for px in range(x_start, min(x_start + TILE, width)):
                d0 = dL_dC[py, px, 0]
                d1 = dL_dC[py, px, 1]
                d2 = dL_dC[py, px, 2]
                if d0 == 0.0 and d1 == 0.0 and d2 == 0.0:
                    continue
                fx = px + 0.5
                fy = py + 0.5
                # replay the forward pass for this pixel
                T = 1.0
                m = 0
                for e in range(e0, out_last[py, px]):
                    s = entries[e]
                    dx = fx - mean2d[s, 0]
                    dy = fy - mean2d[s, 1]
                    power = -0.5 * (conic[s, 0] * dx * dx + conic[s, 2] * dy * dy) \
                        - conic[s, 1] * dx * dy
                    if power < POWER_CUT:
                        continue
                    G = np.exp(power)
                    w = alpha[s] * G
                    if w > ALPHA_MAX:
                        w = ALPHA_MAX
                    ws[m] = w
                    Ts[m] = T
                    gs[m] = G
                    es[m] = e
                    m += 1
                    T = T * (1.0 - w)
                Tf = out_T[py, px]
                a0 = Tf * bg[0]
                a1 = Tf * bg[1]
                a2 = Tf * bg[2]
                for k in range(m - 1, -1, -1):
                    e = es[k]
                    s = entries[e]
                    w = ws[k]
                    Tk = Ts[k]
                    wt = w * Tk
                    g_color[e, 0] += wt * d0
                    g_color[e, 1] += wt * d1
                    g_color[e, 2] += wt * d2
                    inv = 1.0 / (1.0 - w)
                    dL_dw = d0 * (color[s, 0] * Tk - a0 * inv) \
                        + d1 * (color[s, 1] * Tk - a1 * inv) \
                        + d2 * (color[s, 2] * Tk - a2 * inv)
                    a0 += color[s, 0] * wt
                    a1 += color[s, 1] * wt
                    a2 += color[s, 2] * wt
                    G = gs[k]
                    if alpha[s] * G > ALPHA_MAX:
                        continue
                    g_alpha[e] += dL_dw * G
                    dL_dpow = dL_dw * alpha[s] * G
                    dx = fx - mean2d[s, 0]
                    dy = fy - mean2d[s, 1]
                    g_mean[e, 0] += dL_dpow * (conic[s, 0] * dx + conic[s, 1] * dy)
                    g_mean[e, 1] += dL_dpow * (conic[s, 1] * dx + conic[s, 2] * dy)
                    g_conic[e, 0] += dL_dpow * (-0.5 * dx * dx)
                    g_conic[e, 1] += dL_dpow * (-dx * dy)
                    g_conic[e, 2] += dL_dpow * (-0.5 * dy * dy)


@nb.njit(cache=True)
def _reduce_entries(entries, g_mean, g_conic, g_alpha, g_color, n,
                    d_mean, d_conic, d_alpha, d_color):
    for e in range(entries.shape[0]):
        s = entries[e]
        d_mean[s, 0] += g_mean[e, 0]
        d_mean[s, 1] += g_mean[e, 1]
        for c in range(3):
            d_conic[s, c] += g_conic[e, c]
            d_color[s, c] += g_color[e, c]
        d_alpha[s] += g_alpha[e]


@nb.njit(cache=True)
def _quat_backward(q, dRq, dq):
    n = np.sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3])
    w, x, y, z = q[0] / n, q[1] / n, q[2] / n, q[3] / n
    gw = (-2 * z * dRq[0, 1] + 2 * y * dRq[0, 2] + 2 * z * dRq[1, 0] - 2 * x * dRq[1, 2]
          - 2 * y * dRq[2, 0] + 2 * x * dRq[2, 1])
    gx = (2 * y * dRq[0, 1] + 2 * z * dRq[0, 2] + 2 * y * dRq[1, 0] - 4 * x * dRq[1, 1]
          - 2 * w * dRq[1, 2] + 2 * z * dRq[2, 0] + 2 * w * dRq[2, 1] - 4 * x * dRq[2, 2])
    gy = (-4 * y * dRq[0, 0] + 2 * x * dRq[0, 1] + 2 * w * dRq[0, 2] + 2 * x * dRq[1, 0]
          + 2 * z * dRq[1, 2] - 2 * w * dRq[2, 0] + 2 * z * dRq[2, 1] - 4 * y * dRq[2, 2])
    gz = (-4 * z * dRq[0, 0] - 2 * w * dRq[0, 1] + 2 * x * dRq[0, 2] + 2 * w * dRq[1, 0]
          - 4 * z * dRq[1, 1] + 2 * y * dRq[1, 2] + 2 * x * dRq[2, 0] + 2 * y * dRq[2, 1])
    dot = gw * w + gx * x + gy * y + gz * z
    dq[0] = (gw - dot * w) / n
    dq[1] = (gx - dot * x) / n
    dq[2] = (gy - dot * y) / n
    dq[3] = (gz - dot * z) / n


@nb.njit(cache=True)
def _preprocess_backward(mu, rot, log_s, opac, sh, deg, R, tv, campos, fu, fv, visible,
                         color, d_mean, d_conic, d_alpha, d_color,
                         g_mu, g_rot, g_scale, g_opac, g_sh):
    n = mu.shape[0]
    Sigma = np.empty((3, 3))
    M = np.empty((3, 3))
    Rq = np.empty((3, 3))
    T = np.empty((2, 3))
    dSigma = np.empty((3, 3))
    dM = np.empty((3, 3))
    dRq = np.empty((3, 3))
    dT = np.empty((2, 3))
    dq = np.empty(4)
    basis = np.empty(16)
    bx = np.empty(16)
    by = np.empty(16)
    bz = np.empty(16)
    for s in range(n):
        if not visible[s]:
            continue
        tx = R[0, 0] * mu[s, 0] + R[0, 1] * mu[s, 1] + R[0, 2] * mu[s, 2] + tv[0]
        ty = R[1, 0] * mu[s, 0] + R[1, 1] * mu[s, 1] + R[1, 2] * mu[s, 2] + tv[1]
        tz = R[2, 0] * mu[s, 0] + R[2, 1] * mu[s, 1] + R[2, 2] * mu[s, 2] + tv[2]
        j00 = fu / tz
        j02 = -fu * tx / (tz * tz)
        j11 = fv / tz
        j12 = -fv * ty / (tz * tz)
        for c in range(3):
            T[0, c] = j00 * R[0, c] + j02 * R[2, c]
            T[1, c] = j11 * R[1, c] + j12 * R[2, c]
        _cov3d(rot[s], log_s[s], Sigma, M, Rq)
        a = LOWPASS
        b = 0.0
        d = LOWPASS
        for i in range(3):
            for j in range(3):
                a += T[0, i] * Sigma[i, j] * T[0, j]
                b += T[0, i] * Sigma[i, j] * T[1, j]
                d += T[1, i] * Sigma[i, j] * T[1, j]
        det = a * d - b * b
        ka = d / det
        kb = -b / det
        kc = a / det
        # dL/dK as a full symmetric matrix, then dL/dCov2 = -K dK K
        ga = d_conic[s, 0]
        gb = 0.5 * d_conic[s, 1]
        gc = d_conic[s, 2]
        # P = dK K
        p00 = ga * ka + gb * kb
        p01 = ga * kb + gb * kc
        p10 = gb * ka + gc * kb
        p11 = gb * kb + gc * kc
        c00 = -(ka * p00 + kb * p10)
        c01 = -(ka * p01 + kb * p11)
        c11 = -(kb * p01 + kc * p11)
        # dSigma = T^T dCov2 T ; dT = 2 dCov2 T Sigma
        for i in range(3):
            for j in range(3):
                dSigma[i, j] = (T[0, i] * (c00 * T[0, j] + c01 * T[1, j])
                                + T[1, i] * (c01 * T[0, j] + c11 * T[1, j]))
        for c in range(3):
            u0 = 0.0
            u1 = 0.0
            for k in range(3):
                u0 += T[0, k] * Sigma[k, c]
                u1 += T[1, k] * Sigma[k, c]
            dT[0, c] = 2.0 * (c00 * u0 + c01 * u1)
            dT[1, c] = 2.0 * (c01 * u0 + c11 * u1)
        # dJ = dT R^T (only the non-zero Jacobian entries matter)
        dj00 = dT[0, 0] * R[0, 0] + dT[0, 1] * R[0, 1] + dT[0, 2] * R[0, 2]
        dj02 = dT[0, 0] * R[2, 0] + dT[0, 1] * R[2, 1] + dT[0, 2] * R[2, 2]
        dj11 = dT[1, 0] * R[1, 0] + dT[1, 1] * R[1, 1] + dT[1, 2] * R[1, 2]
        dj12 = dT[1, 0] * R[2, 0] + dT[1, 1] * R[2, 1] + dT[1, 2] * R[2, 2]
        tz2 = tz * tz
        tz3 = tz2 * tz
        dtx = dj02 * (-fu / tz2) + d_mean[s, 0] * fu / tz
        dty = dj12 * (-fv / tz2) + d_mean[s, 1] * fv / tz
        dtz = (dj00 * (-fu / tz2) + dj02 * (2 * fu * tx / tz3) + dj11 * (-fv / tz2)
               + dj12 * (2 * fv * ty / tz3)
               - d_mean[s, 0] * fu * tx / tz2 - d_mean[s, 1] * fv * ty / tz2)
        for i in range(3):
            g_mu[s, i] += R[0, i] * dtx + R[1, i] * dty + R[2, i] * dtz
        # Sigma = M M^T
        for i in range(3):
            for j in range(3):
                acc = 0.0
                for k in range(3):
                    acc += (dSigma[i, k] + dSigma[k, i]) * M[k, j]
                dM[i, j] = acc
        for j in range(3):
            sj = np.exp(log_s[s, j])
            acc = 0.0
            for i in range(3):
                acc += dM[i, j] * Rq[i, j]
                dRq[i, j] = dM[i, j] * sj
            g_scale[s, j] += acc * sj
        _quat_backward(rot[s], dRq, dq)
        for i in range(4):
            g_rot[s, i] += dq[i]
        al = 1.0 / (1.0 + np.exp(-opac[s]))
        g_opac[s] += d_alpha[s] * al * (1.0 - al)
        # colour
        vx = mu[s, 0] - campos[0]
        vy = mu[s, 1] - campos[1]
        vz = mu[s, 2] - campos[2]
        nrm = np.sqrt(vx * vx + vy * vy + vz * vz)
        x = vx / nrm
        y = vy / nrm
        z = vz / nrm
        _sh_basis(x, y, z, deg, basis)
        nb_ = (deg + 1) * (deg + 1)
        gdx = 0.0
        gdy = 0.0
        gdz = 0.0
        if deg > 0:
            _sh_basis_grad(x, y, z, deg, bx, by, bz)
        for c in range(3):
            if color[s, c] <= 0.0:
                continue
            dc = d_color[s, c]
            for k in range(nb_):
                g_sh[s, k, c] += basis[k] * dc
                if deg > 0:
                    gdx += sh[s, k, c] * bx[k] * dc
                    gdy += sh[s, k, c] * by[k] * dc
                    gdz += sh[s, k, c] * bz[k] * dc
        if deg > 0:
            proj = gdx * x + gdy * y + gdz * z
            g_mu[s, 0] += (gdx - proj * x) / nrm
            g_mu[s, 1] += (gdy - proj * y) / nrm
            g_mu[s, 2] += (gdz - proj * z) / nrm


# ------------------------------------------------------------------- public API

def _arr(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def _project_all(splats: SplatSet, cam: CameraView, sh_degree: int):
    n = len(splats)
    mean2d = np.zeros((n, 2))
    conic = np.zeros((n, 3))
    depth = np.zeros(n)
    alpha = np.zeros(n)
    color = np.zeros((n, 3))
    rect = np.zeros((n, 4), dtype=np.int64)
    if n:
        _preprocess(_arr(splats.mu), _arr(splats.rot), _arr(splats.scale), _arr(splats.opacity),
                    _arr(splats.sh), sh_degree, _arr(cam.R), _arr(cam.t), _arr(cam.center),
                    float(cam.fu), float(cam.fv), float(cam.cu), float(cam.cv),
                    int(cam.width), int(cam.height), mean2d, conic, depth, alpha, color, rect)
    visible = rect[:, 0] <= rect[:, 1]
    return mean2d, conic, depth, alpha, color, rect, visible


def render(splats: SplatSet, cam: CameraView, weight_map: Optional[np.ndarray] = None,
           bg=None, sh_degree: Optional[int] = None, view_id: int = -1) -> RenderOutput:
    """Front-to-back alpha compositing of depth-sorted splats over 16x16 tiles.

    ``weight_map`` (H, W) enables the texture-weighted max-contributor area
    accumulator alongside the plain pixel count.
    """
    deg = splats.sh_degree if sh_degree is None else min(sh_degree, splats.sh_degree)
    W, H = int(cam.width), int(cam.height)
    bg = np.zeros(3) if bg is None else _arr(bg)
    mean2d, conic, depth, alpha, color, rect, visible = _project_all(splats, cam, deg)
    order = np.argsort(depth, kind="stable")
    order = order[visible[order]]
    tiles_x = (W + TILE - 1) // TILE
    tiles_y = (H + TILE - 1) // TILE
    offsets, entries = _bin(order, rect, tiles_x, tiles_y)

    out_color = np.zeros((H, W, 3))
    out_depth = np.zeros((H, W))
    out_T = np.ones((H, W))
    out_imax = np.full((H, W), NO_SPLAT, dtype=np.int64)
    out_last = np.zeros((H, W), dtype=np.int64)
    entry_maxw = np.zeros(len(entries))
    _forward(offsets, entries, mean2d, conic, alpha, color, depth, bg, W, H, tiles_x,
             out_color, out_depth, out_T, out_imax, out_last, entry_maxw)

    n = len(splats)
    max_w = np.zeros(n)
    np.maximum.at(max_w, entries, entry_maxw)
    hit = out_imax >= 0
    counts = np.bincount(out_imax[hit], minlength=n).astype(np.float64)[:n]
    weighted = None
    if weight_map is not None:
        wm = np.asarray(weight_map, dtype=np.float64)
        if wm.shape != (H, W):
            raise ValueError(f"weight map shape {wm.shape} != ({H}, {W})")
        weighted = np.bincount(out_imax[hit], weights=wm[hit], minlength=n)[:n]
    state = (deg, bg, mean2d, conic, alpha, color, visible, offsets, entries, tiles_x, out_last)
    return RenderOutput(out_color, out_depth, out_T, out_imax, max_w, counts, weighted, visible,
                        view_id, state)


def render_backward(splats: SplatSet, cam: CameraView, dL_dcolor: np.ndarray,
                    forward: Optional[RenderOutput] = None, bg=None,
                    sh_degree: Optional[int] = None) -> Gradients:
    """Analytic gradients of a scalar loss given dL/d(rendered colour)."""
    if forward is None or forward._state is None:
        forward = render(splats, cam, bg=bg, sh_degree=sh_degree)
    deg, bg, mean2d, conic, alpha, color, visible, offsets, entries, tiles_x, out_last = \
        forward._state
    W, H = int(cam.width), int(cam.height)
    n = len(splats)
    E = len(entries)
    g_mean = np.zeros((E, 2))
    g_conic = np.zeros((E, 3))
    g_alpha = np.zeros(E)
    g_color = np.zeros((E, 3))
    _backward(offsets, entries, mean2d, conic, alpha, color, bg, W, H, tiles_x,
              forward.final_transmittance, out_last, _arr(dL_dcolor),
              g_mean, g_conic, g_alpha, g_color)
    d_mean = np.zeros((n, 2))
    d_conic = np.zeros((n, 3))
    d_alpha = np.zeros(n)
    d_color = np.zeros((n, 3))
    _reduce_entries(entries, g_mean, g_conic, g_alpha, g_color, n,
                    d_mean, d_conic, d_alpha, d_color)
    g = Gradients(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)), np.zeros(n),
                  np.zeros_like(splats.sh), d_mean)
    if n:
        _preprocess_backward(_arr(splats.mu), _arr(splats.rot), _arr(splats.scale),
                             _arr(splats.opacity), _arr(splats.sh), deg, _arr(cam.R), _arr(cam.t),
                             _arr(cam.center), float(cam.fu), float(cam.fv), visible, color,
                             d_mean, d_conic, d_alpha, d_color,
                             g.mu, g.rot, g.scale, g.opacity, g.sh)
    return g


def splat_colors(splats: SplatSet, cam: CameraView, sh_degree: Optional[int] = None) -> np.ndarray:
    """View-dependent RGB of every splat (numpy path, used by tests and tools)."""
    deg = splats.sh_degree if sh_degree is None else sh_degree
    d = splats.mu - cam.center
    d = d / np.linalg.norm(d, axis=1, keepdims=True)
    return eval_sh(splats.sh, d, deg)


__all__ = [
    "ProjectedSplat", "RenderOutput", "Gradients", "project_splat", "render", "render_backward",
    "splat_colors", "TILE", "NO_SPLAT", "build_covariance", "sigmoid", "num_sh_coeffs",
]
