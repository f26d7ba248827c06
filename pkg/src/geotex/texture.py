"""Texture-aware blur-split selection.

Pixels are weighted by how textured the training image is around them; a splat
is a blur-split candidate when the summed weight over the pixels it dominates
exceeds a threshold that decays linearly over the densification window.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

ALPHA_S = 20.0
BETA_S = 0.16
T_START = 40.0
T_END = 4.0

LUMA = np.array([0.299, 0.587, 0.114])
SOBEL_MAX = 4.0


@dataclass
class TextureMaps:
    grad: np.ndarray
    weight: np.ndarray

    @classmethod
    def from_image(cls, image, alpha_s=ALPHA_S, beta_s=BETA_S) -> "TextureMaps":
        g = gradient_map(image)
        return cls(g, texture_weight(g, alpha_s, beta_s))


def gradient_map(image: np.ndarray) -> np.ndarray:
    """Sobel gradient magnitude of Rec. 601 luminance, scaled so an ideal step reads 1."""
    img = np.asarray(image, dtype=np.float64)
    gray = img @ LUMA if img.ndim == 3 else img
    gx = ndimage.sobel(gray, axis=1, mode="nearest")
    gy = ndimage.sobel(gray, axis=0, mode="nearest")
    return np.clip(np.hypot(gx, gy) / SOBEL_MAX, 0.0, 1.0)


def texture_weight(grad, alpha_s: float = ALPHA_S, beta_s: float = BETA_S):
    """Per-pixel split weight in [0, 1]; equals 0.5 where grad == beta_s."""
    return (np.tanh(alpha_s * (np.asarray(grad, dtype=np.float64) - beta_s)) + 1.0) / 2.0


def weighted_contribution(index_max: np.ndarray, weight: np.ndarray, n_splats: int) -> np.ndarray:
    """Sum of ``weight`` over the pixels where each splat is the max-weight contributor."""
    index_max = np.asarray(index_max)
    weight = np.asarray(weight, dtype=np.float64)
    if index_max.shape != weight.shape:
        raise ValueError("index and weight maps differ in shape")
    hit = index_max >= 0
    return np.bincount(index_max[hit], weights=weight[hit], minlength=n_splats)[:n_splats]


def adaptive_threshold(l, l_s, l_e, t_s: float = T_START, t_e: float = T_END) -> float:
    if not l_s < l_e:
        raise ValueError("densification start must precede its end")
    l = min(max(l, l_s), l_e)
    return t_s + (t_e - t_s) * (l - l_s) / (l_e - l_s)


@dataclass
class DensifyStats:
    """Per-splat statistics gathered between two densification rounds.

    ``weighted_area`` and ``area`` keep the maximum over rendered views of the
    weighted and plain max-contributor areas.
    """

    grad_accum: np.ndarray
    grad3d_accum: np.ndarray
    denom: np.ndarray
    weighted_area: np.ndarray
    area: np.ndarray
    views_seen: set = field(default_factory=set)

    @classmethod
    def zeros(cls, n: int) -> "DensifyStats":
        return cls(np.zeros(n), np.zeros((n, 3)), np.zeros(n), np.zeros(n), np.zeros(n))

    def __len__(self):
        return len(self.denom)

    def add_view(self, view_id, render_out, grad_norm, grad3d=None) -> None:
        vis = render_out.visible
        self.grad_accum[vis] += grad_norm[vis]
        if grad3d is not None:
            self.grad3d_accum[vis] += grad3d[vis]
        self.denom[vis] += 1
        w = render_out.weighted_area
        if w is None:
            w = render_out.contribution_count
        np.maximum(self.weighted_area, w, out=self.weighted_area)
        np.maximum(self.area, render_out.contribution_count, out=self.area)
        self.views_seen.add(view_id)

    @property
    def grad_norm_avg(self) -> np.ndarray:
        return np.divide(self.grad_accum, self.denom, out=np.zeros_like(self.grad_accum),
                         where=self.denom > 0)

    @property
    def grad3d_avg(self) -> np.ndarray:
        return np.divide(self.grad3d_accum, self.denom[:, None],
                         out=np.zeros_like(self.grad3d_accum), where=self.denom[:, None] > 0)


def select_blur_splats(stats: DensifyStats, threshold: float) -> np.ndarray:
    """Ids whose largest per-view weighted max-contributor area is above ``threshold``."""
    return np.flatnonzero(stats.weighted_area > threshold)
