"""Splat data model, covariance construction and spherical-harmonics colour."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

MAX_SH_DEGREE = 3
INIT_OPACITY = 0.1
NO_VIEW = -1


class InvalidParameterError(ValueError):
    pass


def num_sh_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    return np.log(p / (1.0 - p))


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a (w, x, y, z) quaternion. The quaternion is normalised first."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q / n, -1, 0)
    R = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return R.reshape(q.shape[:-1] + (3, 3))


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """(w, x, y, z) quaternion with w >= 0 for a rotation matrix."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


def build_covariance(rot, scale) -> np.ndarray:
    """Sigma = R S S^T R^T for a quaternion ``rot`` and per-axis standard deviations ``scale``.

    Works on single splats or stacked arrays (..., 4) / (..., 3).
    """
    rot = np.asarray(rot, dtype=np.float64)
    scale = np.asarray(scale, dtype=np.float64)
    if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(scale))):
        raise InvalidParameterError("non-finite rotation or scale")
    if np.any(scale <= 0):
        raise InvalidParameterError("scales must be strictly positive")
    if np.any(np.linalg.norm(rot, axis=-1) == 0):
        raise InvalidParameterError("zero quaternion")
    M = quat_to_rotmat(rot) * scale[..., None, :]
    cov = M @ np.swapaxes(M, -1, -2)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis values, shape (..., (degree+1)**2), in the usual splatting sign convention."""
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    out = [np.full(x.shape, SH_C0)]
    if degree >= 1:
        out += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out += [
            SH_C2[0] * x * y,
            SH_C2[1] * y * z,
            SH_C2[2] * (2 * zz - xx - yy),
            SH_C2[3] * x * z,
            SH_C2[4] * (xx - yy),
        ]
    if degree >= 3:
        out += [
            SH_C3[0] * y * (3 * xx - yy),
            SH_C3[1] * x * y * z,
            SH_C3[2] * y * (4 * zz - xx - yy),
            SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
            SH_C3[4] * x * (4 * zz - xx - yy),
            SH_C3[5] * z * (xx - yy),
            SH_C3[6] * x * (xx - 3 * yy),
        ]
    return np.stack(out, axis=-1)


def eval_sh(sh: np.ndarray, direction: np.ndarray, degree: int) -> np.ndarray:
    """RGB from SH coefficients ``sh`` of shape (..., K, 3) seen along unit ``direction``.

    Only the first ``(degree+1)**2`` coefficients are used; the result is offset by
    0.5 and clamped at zero.
    """
    sh = np.asarray(sh, dtype=np.float64)
    if not 0 <= degree <= MAX_SH_DEGREE:
        raise InvalidParameterError(f"SH degree {degree} outside 0..{MAX_SH_DEGREE}")
    k = num_sh_coeffs(degree)
    if sh.shape[-2] < k:
        raise InvalidParameterError(
            f"degree {degree} needs {k} coefficients, only {sh.shape[-2]} stored"
        )
    basis = sh_basis(direction, degree)
    rgb = np.einsum("...k,...kc->...c", basis, sh[..., :k, :])
    return np.maximum(rgb + 0.5, 0.0)


def rgb_to_sh_dc(rgb):
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


@dataclass
class GaussianSplat:
    """One anisotropic Gaussian with its reference-view bookkeeping.

    ``scale`` is stored as log standard deviations and ``opacity`` as a logit.
    ``init_depth_ratio`` is NaN while ``init_ref_view`` is unset.
    """

    mu: np.ndarray
    rot: np.ndarray
    scale: np.ndarray
    opacity: float
    sh: np.ndarray
    ref_view: int = NO_VIEW
    max_weight: float = 0.0
    init_ref_view: int = NO_VIEW
    init_depth_ratio: float = float("nan")

    @property
    def sh_degree(self) -> int:
        return int(round(np.sqrt(self.sh.shape[0]))) - 1

    @property
    def activated_scale(self) -> np.ndarray:
        return np.exp(self.scale)

    @property
    def activated_opacity(self) -> float:
        return float(sigmoid(self.opacity))

    def covariance(self) -> np.ndarray:
        return build_covariance(self.rot, np.exp(self.scale))


class SplatSet:
    """Structure-of-arrays container for a growable collection of splats.

    Arrays are float64 except the view ids. ``sh`` has shape (N, K, 3) where
    K = (max_sh_degree + 1)**2.
    """

    FIELDS = (
        "mu", "rot", "scale", "opacity", "sh",
        "ref_view", "max_weight", "init_ref_view", "init_depth_ratio",
    )
    PARAMS = ("mu", "rot", "scale", "opacity", "sh")

    def __init__(self, mu, rot, scale, opacity, sh, ref_view=None, max_weight=None,
                 init_ref_view=None, init_depth_ratio=None):
        self.mu = np.asarray(mu, dtype=np.float64).reshape(-1, 3)
        n = len(self.mu)
        self.rot = np.asarray(rot, dtype=np.float64).reshape(n, 4)
        self.scale = np.asarray(scale, dtype=np.float64).reshape(n, 3)
        self.opacity = np.asarray(opacity, dtype=np.float64).reshape(n)
        sh = np.asarray(sh, dtype=np.float64)
        k = sh.shape[-2] if sh.ndim == 3 else (sh.size // (3 * n) if n else 1)
        self.sh = sh.reshape(n, k, 3)
        self.ref_view = _int_or(ref_view, n, NO_VIEW)
        self.max_weight = _float_or(max_weight, n, 0.0)
        self.init_ref_view = _int_or(init_ref_view, n, NO_VIEW)
        self.init_depth_ratio = _float_or(init_depth_ratio, n, np.nan)

    @classmethod
    def empty(cls, sh_degree: int = MAX_SH_DEGREE) -> "SplatSet":
        k = num_sh_coeffs(sh_degree)
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0),
                   np.zeros((0, k, 3)))

    @classmethod
    def from_splats(cls, splats: Sequence[GaussianSplat], sh_degree: Optional[int] = None):
        if not splats:
            return cls.empty(MAX_SH_DEGREE if sh_degree is None else sh_degree)
        return cls(
            np.stack([s.mu for s in splats]),
            np.stack([s.rot for s in splats]),
            np.stack([s.scale for s in splats]),
            np.array([s.opacity for s in splats]),
            np.stack([s.sh for s in splats]),
            ref_view=[s.ref_view for s in splats],
            max_weight=[s.max_weight for s in splats],
            init_ref_view=[s.init_ref_view for s in splats],
            init_depth_ratio=[s.init_depth_ratio for s in splats],
        )

    def __len__(self) -> int:
        return len(self.mu)

    @property
    def sh_degree(self) -> int:
        return int(round(np.sqrt(self.sh.shape[1]))) - 1

    def splat(self, i: int) -> GaussianSplat:
        return GaussianSplat(
            mu=self.mu[i].copy(), rot=self.rot[i].copy(), scale=self.scale[i].copy(),
            opacity=float(self.opacity[i]), sh=self.sh[i].copy(),
            ref_view=int(self.ref_view[i]), max_weight=float(self.max_weight[i]),
            init_ref_view=int(self.init_ref_view[i]),
            init_depth_ratio=float(self.init_depth_ratio[i]),
        )

    def __iter__(self):
        return (self.splat(i) for i in range(len(self)))

    def subset(self, index) -> "SplatSet":
        return SplatSet(**{f: getattr(self, f)[index] for f in self.FIELDS})

    def copy(self) -> "SplatSet":
        return SplatSet(**{f: getattr(self, f).copy() for f in self.FIELDS})

    def extend(self, other: "SplatSet") -> None:
        if other.sh.shape[1] != self.sh.shape[1]:
            raise InvalidParameterError("SH coefficient counts differ")
        for f in self.FIELDS:
            setattr(self, f, np.concatenate([getattr(self, f), getattr(other, f)]))

    def normalize_rotations(self) -> None:
        self.rot /= np.linalg.norm(self.rot, axis=1, keepdims=True)

    def covariances(self) -> np.ndarray:
        return build_covariance(self.rot, np.exp(self.scale))

    def activated_opacity(self) -> np.ndarray:
        return sigmoid(self.opacity)

    def __eq__(self, other):
        if not isinstance(other, SplatSet):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, f), getattr(other, f), equal_nan=True)
            for f in self.FIELDS
        )


def _int_or(v, n, default):
    if v is None:
        return np.full(n, default, dtype=np.int64)
    return np.asarray(v, dtype=np.int64).reshape(n)


def _float_or(v, n, default):
    if v is None:
        return np.full(n, default, dtype=np.float64)
    return np.asarray(v, dtype=np.float64).reshape(n)


@dataclass
class CameraView:
    """Pinhole view. ``R``/``t`` map world points to camera space: x_c = R x_w + t.

    Pixel (i, j) covers [i, i+1) x [j, j+1); its centre sits at (i+0.5, j+0.5).
    """

    fu: float
    fv: float
    cu: float
    cv: float
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int
    image: Optional[np.ndarray] = None
    depth_prior: Optional[np.ndarray] = None
    normal_prior: Optional[np.ndarray] = None
    normal_frame: str = "camera"
    name: str = ""

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not (self.fu > 0 and self.fv > 0):
            raise InvalidParameterError("focal lengths must be positive")
        if self.image is not None and self.image.shape[:2] != (self.height, self.width):
            raise InvalidParameterError(
                f"image shape {self.image.shape[:2]} != ({self.height}, {self.width})"
            )
        if self.normal_frame not in ("camera", "world"):
            raise InvalidParameterError(f"unknown normal frame {self.normal_frame!r}")

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.t

    def project(self, points_cam: np.ndarray) -> np.ndarray:
        p = np.asarray(points_cam, dtype=np.float64)
        return np.stack(
            [self.fu * p[..., 0] / p[..., 2] + self.cu, self.fv * p[..., 1] / p[..., 2] + self.cv],
            axis=-1,
        )

    def pixel_rays(self) -> np.ndarray:
        """Camera-space rays with z = 1 through every pixel centre, shape (H, W, 3)."""
        u = (np.arange(self.width) + 0.5 - self.cu) / self.fu
        v = (np.arange(self.height) + 0.5 - self.cv) / self.fv
        uu, vv = np.meshgrid(u, v)
        return np.stack([uu, vv, np.ones_like(uu)], axis=-1)

    def world_normals(self) -> Optional[np.ndarray]:
        if self.normal_prior is None:
            return None
        if self.normal_frame == "world":
            return self.normal_prior
        return self.normal_prior @ self.R

    def without_image_data(self) -> "CameraView":
        return CameraView(self.fu, self.fv, self.cu, self.cv, self.R, self.t,
                          self.width, self.height, name=self.name)


@dataclass
class Scene:
    splats: SplatSet
    views: list = field(default_factory=list)
    iteration: int = 0

    def check(self) -> None:
        n = len(self.views)
        for name in ("ref_view", "init_ref_view"):
            ids = getattr(self.splats, name)
            bad = (ids != NO_VIEW) & ((ids < 0) | (ids >= n))
            if np.any(bad):
                raise InvalidParameterError(f"{name} refers to a missing view")


def init_scales_from_points(positions: np.ndarray, fallback_scale: float = 0.01) -> np.ndarray:
    """Per-point log scale: log of the mean distance to the 3 nearest other points."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    n = len(positions)
    if n < 4:
        return np.full(n, np.log(fallback_scale))
    dist, _ = cKDTree(positions).query(positions, k=4)
    mean = dist[:, 1:].mean(axis=1)
    mean = np.where(mean > 0, mean, fallback_scale)
    return np.log(mean)


def splats_from_sfm(positions, colors, sh_degree: int = MAX_SH_DEGREE,
                    fallback_scale: float = 0.01) -> SplatSet:
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(positions)):
        raise InvalidParameterError("non-finite SfM position")
    n = len(positions)
    log_s = init_scales_from_points(positions, fallback_scale)
    sh = np.zeros((n, num_sh_coeffs(sh_degree), 3))
    sh[:, 0, :] = rgb_to_sh_dc(np.asarray(colors, dtype=np.float64).reshape(n, 3))
    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    return SplatSet(
        positions.copy(), rot, np.repeat(log_s[:, None], 3, axis=1),
        np.full(n, logit(INIT_OPACITY)), sh,
    )


def splat_from_sfm_point(position, color, neighbors=None, sh_degree: int = MAX_SH_DEGREE,
                         fallback_scale: float = 0.01) -> GaussianSplat:
    """Isotropic splat for one SfM point.

    ``neighbors`` holds the other points of the cloud; with fewer than three of
    them the fixed ``fallback_scale`` is used.
    """
    position = np.asarray(position, dtype=np.float64).reshape(1, 3)
    others = np.zeros((0, 3)) if neighbors is None else np.asarray(neighbors, float).reshape(-1, 3)
    pts = np.concatenate([position, others])
    cols = np.zeros((len(pts), 3))
    cols[0] = color
    return splats_from_sfm(pts, cols, sh_degree, fallback_scale).splat(0)
