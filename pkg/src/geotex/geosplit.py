"""Geometry-aware splitting: depth-ratio validation, normal-guided child placement and the
clone/split/prune round that uses them.

A depth ratio compares a monocular depth prior with a splat's projection depth.
The prior has an unknown global scale, so only relative changes of the ratio
are meaningful.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import NO_VIEW, CameraView, GaussianSplat, SplatSet, quat_to_rotmat, sigmoid

log = logging.getLogger(__name__)

DELTA_P = 0.1


@dataclass
class AdcConfig:
    grad_threshold: float = 2e-4
    densify_interval: int = 100
    opacity_prune_floor: float = 0.005
    scale_split_threshold: float = 0.01  # fraction of scene extent
    split_scale_divisor: float = 1.6
    delta_p: float = DELTA_P
    densify_from: int = 500
    densify_until: int = 15000
    opacity_reset_interval: int = 3000
    n_children: int = 2

    def __post_init__(self):
        if self.delta_p <= 0:
            raise ValueError("delta_p must be positive")
        if self.densify_interval <= 0 or self.opacity_reset_interval <= 0:
            raise ValueError("intervals must be positive")


@dataclass
class DepthRatioRecord:
    view: int
    proj_depth: float
    prior_depth: float

    @property
    def ratio(self) -> float:
        return self.prior_depth / self.proj_depth


def project_to_view(mu, cam: CameraView):
    """(Z, pixel) of a world point in ``cam``, or None when behind the camera or off-image."""
    p = cam.to_camera(mu)
    if p[2] <= 0:
        return None
    x = np.array([cam.fu * p[0] / p[2] + cam.cu, cam.fv * p[1] / p[2] + cam.cv])
    if not (0 <= x[0] < cam.width and 0 <= x[1] < cam.height):
        return None
    return float(p[2]), x


def _lookup(cam: CameraView, x):
    return int(np.floor(x[1])), int(np.floor(x[0]))


def depth_record(mu, cam: CameraView, view_id: int = -1) -> Optional[DepthRatioRecord]:
    if cam.depth_prior is None:
        return None
    hit = project_to_view(mu, cam)
    if hit is None:
        return None
    z, x = hit
    d = cam.depth_prior[_lookup(cam, x)]
    if not (np.isfinite(d) and d > 0):
        return None
    return DepthRatioRecord(view_id, z, float(d))


def depth_ratio(mu, cam: CameraView) -> Optional[float]:
    """Prior depth at the nearest pixel of the projection over the projection depth."""
    rec = depth_record(mu, cam)
    return None if rec is None else rec.ratio


def vdrc_child(parent_ratio: float, child_ratio: Optional[float], delta_p: float = DELTA_P):
    """Relative depth-ratio change of a child w.r.t. its parent, and whether to keep it."""
    if child_ratio is None or not np.isfinite(child_ratio):
        return float("nan"), True
    p = abs(parent_ratio - child_ratio) / parent_ratio
    return p, p <= delta_p


def vdrc_parent(g: GaussianSplat, views, delta_p: float = DELTA_P):
    """Self-check of a parent against the ratio recorded on its initial reference view.

    Returns (P_hat, keep). Splats without that bookkeeping, or whose current
    ratio cannot be measured, pass.
    """
    if g.init_ref_view == NO_VIEW or not np.isfinite(g.init_depth_ratio):
        return float("nan"), True
    r = depth_ratio(g.mu, views[g.init_ref_view])
    if r is None:
        return float("nan"), True
    p = abs(g.init_depth_ratio - r) / g.init_depth_ratio
    return p, p <= delta_p


def guide_position(mu_hat, mu_a, normal, grad):
    """Blend a sampled child position with its projection onto the parent's tangent plane.

    ``grad`` = 0 puts the child on the plane, ``grad`` = 1 keeps the sample.
    """
    mu_hat = np.asarray(mu_hat, dtype=np.float64)
    mu_a = np.asarray(mu_a, dtype=np.float64)
    n = np.asarray(normal, dtype=np.float64)
    mu_perp = mu_hat - np.dot(mu_hat - mu_a, n) * n
    if grad == 1.0:
        return mu_hat.copy()
    if grad == 0.0:
        return mu_perp
    return (mu_hat - mu_perp) * grad + mu_perp


@dataclass
class ChildRecord:
    parent: int
    P: float
    keep: bool
    guided: bool


@dataclass
class SplitResult:
    children: list
    records: list
    reserved: Optional[int] = None  # index in ``children`` of the parent copy, if any

    def __iter__(self):
        return iter(self.children)

    def __len__(self):
        return len(self.children)


def sample_children(parent: GaussianSplat, views, guide_maps, rng: np.random.Generator, n: int = 2,
                    cfg: Optional[AdcConfig] = None, vdrc: bool = True, normal_guide: bool = True,
                    parent_id: int = -1):
    """Split ``parent`` into ``n`` children on its reference view.

    ``guide_maps[v]`` is the per-pixel scalar in [0, 1] used to weight the normal
    guidance (the normalised image gradient by default). A child rejected by
    depth-ratio validation is replaced by a copy of the parent; several rejections
    still yield a single copy.
    """
    cfg = cfg or AdcConfig()
    scales = np.exp(parent.scale)
    R = quat_to_rotmat(parent.rot)
    vid = parent.ref_view
    view = views[vid] if vid != NO_VIEW else None
    ratio_a = depth_ratio(parent.mu, view) if view is not None else None

    normal = None
    if normal_guide and view is not None:
        normals = view.world_normals()
        hit = project_to_view(parent.mu, view)
        if normals is not None and hit is not None:
            nv = normals[_lookup(view, hit[1])]
            if np.linalg.norm(nv) > 0.5:
                normal = nv / np.linalg.norm(nv)

    children, records = [], []
    reserved = None
    for _ in range(n):
        mu_hat = parent.mu + R @ (rng.standard_normal(3) * scales)
        keep, p = True, float("nan")
        if vdrc and ratio_a is not None:
            p, keep = vdrc_child(ratio_a, depth_ratio(mu_hat, view), cfg.delta_p)
        if not keep:
            records.append(ChildRecord(parent_id, p, False, False))
            if reserved is None:
                reserved = len(children)
                children.append(GaussianSplat(**{**parent.__dict__}))
            continue
        mu_c, guided = mu_hat, False
        if normal is not None:
            hit = project_to_view(mu_hat, view)
            gmap = guide_maps[vid] if guide_maps is not None else None
            if hit is not None and gmap is not None:
                g = float(np.clip(gmap[_lookup(view, hit[1])], 0.0, 1.0))
                mu_c, guided = guide_position(mu_hat, parent.mu, normal, g), True
            else:
                log.debug("no guidance at child projection of splat %d", parent_id)
        r_c = depth_ratio(mu_c, view) if view is not None else None
        if r_c is None:
            r_c = ratio_a
        child = GaussianSplat(
            mu=mu_c, rot=parent.rot.copy(), scale=np.log(scales / cfg.split_scale_divisor),
            opacity=parent.opacity, sh=parent.sh.copy(), ref_view=vid, max_weight=0.0,
            init_ref_view=vid if r_c is not None else NO_VIEW,
            init_depth_ratio=r_c if r_c is not None else float("nan"),
        )
        children.append(child)
        records.append(ChildRecord(parent_id, p, True, guided))
    return SplitResult(children, records, reserved)


def update_reference_view(splats: SplatSet, view_id: int, max_weight: np.ndarray) -> np.ndarray:
    """Move the reference view of splats whose blend weight in ``view_id`` beats the record."""
    better = max_weight > splats.max_weight
    splats.ref_view[better] = view_id
    splats.max_weight[better] = max_weight[better]
    return better


@dataclass
class Decision:
    iteration: int
    splat: int
    action: str
    s_hat: float = float("nan")
    P: float = float("nan")
    P_hat: float = float("nan")
    decision: str = ""

    def row(self):
        return [self.iteration, self.splat, self.action, repr(self.s_hat), repr(self.P),
                repr(self.P_hat), self.decision]


DECISION_HEADER = ["iteration", "splat", "action", "s_hat", "P", "P_hat", "decision"]


def write_decisions(path, decisions) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DECISION_HEADER)
        for d in decisions:
            w.writerow(d.row())


@dataclass
class AdcResult:
    splats: SplatSet
    source: np.ndarray  # old index each new splat inherits optimiser state from, -1 = fresh
    decisions: list = field(default_factory=list)
    n_cloned: int = 0
    n_split: int = 0
    n_excluded: int = 0
    n_rejected_children: int = 0
    n_pruned: int = 0


def parent_rng(seed: int, iteration: int, splat_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, iteration, splat_id])


def adc_step(splats: SplatSet, stats, blur_ids, cfg: AdcConfig, views, guide_maps, extent: float,
             iteration: int = 0, seed: int = 0, vdrc: bool = True, normal_guide: bool = True,
             clone_step: float = 0.0) -> AdcResult:
    """One densification round: clone small high-gradient splats, split large ones and blur
    splats with validated children, then prune transparent splats.
    """
    n = len(splats)
    grads = stats.grad_norm_avg
    selected = grads >= cfg.grad_threshold
    large = np.exp(splats.scale).max(axis=1) > cfg.scale_split_threshold * extent
    blur = np.zeros(n, dtype=bool)
    blur[np.asarray(blur_ids, dtype=np.int64)] = True
    clone = selected & ~large & ~blur
    split = (selected & large) | blur

    decisions = []
    s_hat = stats.weighted_area
    result_parts = [splats.subset(~split)]
    source = [np.flatnonzero(~split)]

    clone_ids = np.flatnonzero(clone)
    if len(clone_ids):
        c = splats.subset(clone_ids)
        g3 = stats.grad3d_avg[clone_ids]
        norm = np.linalg.norm(g3, axis=1, keepdims=True)
        c.mu = c.mu - clone_step * np.divide(g3, norm, out=np.zeros_like(g3), where=norm > 0)
        c.max_weight[:] = 0.0
        result_parts.append(c)
        source.append(np.full(len(clone_ids), -1))
        for i in clone_ids:
            decisions.append(Decision(iteration, int(i), "clone", float(s_hat[i]), decision="clone"))

    n_split = n_excluded = n_rejected = 0
    kids = []
    kid_source = []
    for i in np.flatnonzero(split):
        action = "blur" if blur[i] and not (selected[i] and large[i]) else "split"
        parent = splats.splat(int(i))
        p_hat = float("nan")
        if vdrc:
            p_hat, ok = vdrc_parent(parent, views, cfg.delta_p)
            if not ok:
                n_excluded += 1
                kids.append(parent)
                kid_source.append(int(i))
                decisions.append(Decision(iteration, int(i), action, float(s_hat[i]), P_hat=p_hat,
                                          decision="excluded"))
                continue
        rng = parent_rng(seed, iteration, int(i))
        res = sample_children(parent, views, guide_maps, rng, cfg.n_children, cfg,
                              vdrc=vdrc, normal_guide=normal_guide, parent_id=int(i))
        n_split += 1
        for k, ch in enumerate(res.children):
            kids.append(ch)
            kid_source.append(int(i) if k == res.reserved else -1)
        for rec in res.records:
            if not rec.keep:
                n_rejected += 1
            decisions.append(Decision(iteration, int(i), action, float(s_hat[i]), P=rec.P,
                                      P_hat=p_hat, decision="keep" if rec.keep else "reject"))
    if kids:
        result_parts.append(SplatSet.from_splats(kids))
        source.append(np.array(kid_source, dtype=np.int64))

    out = result_parts[0]
    for part in result_parts[1:]:
        out.extend(part)
    src = np.concatenate(source) if source else np.zeros(0, dtype=np.int64)

    keep = sigmoid(out.opacity) >= cfg.opacity_prune_floor
    n_pruned = int((~keep).sum())
    out = out.subset(keep)
    src = src[keep]
    return AdcResult(out, src, decisions, len(clone_ids), n_split, n_excluded, n_rejected,
                     n_pruned)


def reset_opacity(splats: SplatSet, ceiling: float = 0.01) -> None:
    """Clamp activated opacities to ``ceiling`` (periodic reset)."""
    cap = np.log(ceiling / (1.0 - ceiling))
    np.minimum(splats.opacity, cap, out=splats.opacity)
