"""Optimisation loop: L1 + D-SSIM loss, Adam updates, densification schedule, checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .core import CameraView, Scene, SplatSet, logit, sigmoid
from .geosplit import AdcConfig, Decision, adc_step, reset_opacity, update_reference_view
from .rasterizer import render, render_backward
from .texture import (
    ALPHA_S, BETA_S, T_END, T_START, DensifyStats, adaptive_threshold, gradient_map,
    select_blur_splats, texture_weight,
)

log = logging.getLogger(__name__)

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


class NumericAbort(RuntimeError):
    pass


def _gauss_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - size // 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


_WIN = _gauss_window()


def _blur(x):
    """Separable 11x11 Gaussian filter over H and W with zero padding ('same' output)."""
    y = ndimage.correlate1d(x, _WIN, axis=0, mode="constant")
    return ndimage.correlate1d(y, _WIN, axis=1, mode="constant")


def _ssim_terms(a, b):
    mu_a, mu_b = _blur(a), _blur(b)
    e_aa, e_bb, e_ab = _blur(a * a), _blur(b * b), _blur(a * b)
    var_a = e_aa - mu_a ** 2
    var_b = e_bb - mu_b ** 2
    cov = e_ab - mu_a * mu_b
    A1 = 2 * mu_a * mu_b + SSIM_C1
    A2 = 2 * cov + SSIM_C2
    B1 = mu_a ** 2 + mu_b ** 2 + SSIM_C1
    B2 = var_a + var_b + SSIM_C2
    return mu_a, mu_b, A1, A2, B1, B2


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def ssim(a, b) -> float:
    """Mean SSIM over pixels and channels (11x11 Gaussian window, sigma 1.5, data in [0, 1])."""
    a, b = _check_pair(a, b)
    _, _, A1, A2, B1, B2 = _ssim_terms(a, b)
    return float(np.mean(A1 * A2 / (B1 * B2)))


def ssim_with_grad(a, b):
    """SSIM and its gradient with respect to ``a``."""
    a, b = _check_pair(a, b)
    mu_a, mu_b, A1, A2, B1, B2 = _ssim_terms(a, b)
    S = A1 * A2 / (B1 * B2)
    n = S.size
    dS = np.full(S.shape, 1.0 / n)
    inv = 1.0 / (B1 * B2)
    # partials of the per-pixel map w.r.t. the local statistics of ``a``
    d_mu_a = dS * ((2 * mu_b * A2 - 2 * mu_b * A1) * inv
                   - S * (2 * mu_a / B1 - 2 * mu_a / B2))
    d_e_aa = dS * (-S / B2)
    d_e_ab = dS * (2 * A1 * inv)
    grad = _blur(d_mu_a) + 2 * a * _blur(d_e_aa) + b * _blur(d_e_ab)
    return float(S.mean()), grad


def compute_loss(render_img, gt, lambda_dssim: float = 0.2):
    """(loss, dloss/drender) for (1 - lambda) * L1 + lambda * (1 - SSIM) / 2."""
    r, g = _check_pair(render_img, gt)
    diff = r - g
    l1 = np.abs(diff).mean()
    d_l1 = np.sign(diff) / diff.size
    if lambda_dssim == 0.0:
        return float(l1), d_l1
    s, d_s = ssim_with_grad(r, g)
    loss = (1 - lambda_dssim) * l1 + lambda_dssim * (1 - s) / 2
    return float(loss), (1 - lambda_dssim) * d_l1 - lambda_dssim * d_s / 2


def psnr(a, b, cap: float = 99.0) -> float:
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return cap
    return min(10.0 * math.log10(1.0 / mse), cap)


# --------------------------------------------------------------------- optimiser

class Adam:
    """Adam over the splat parameter arrays with one learning rate per parameter class."""

    def __init__(self, splats: SplatSet, lrs: dict, betas=(0.9, 0.999), eps=1e-15):
        self.lrs = dict(lrs)
        self.b1, self.b2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(getattr(splats, k)) for k in SplatSet.PARAMS}
        self.v = {k: np.zeros_like(getattr(splats, k)) for k in SplatSet.PARAMS}

    def step(self, splats: SplatSet, grads) -> None:
        self.step_count += 1
        bc1 = 1 - self.b1 ** self.step_count
        bc2 = 1 - self.b2 ** self.step_count
        for k in SplatSet.PARAMS:
            g = getattr(grads, k)
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            lr = self.lrs[k]
            p = getattr(splats, k)
            upd = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if k == "sh":
                p[:, :1] -= lr * upd[:, :1]
                p[:, 1:] -= self.lrs["sh_rest"] * upd[:, 1:]
            else:
                p -= lr * upd

    def remap(self, source: np.ndarray) -> None:
        """Carry state over to a densified set: source[i] is the old index or -1 (fresh)."""
        fresh = source < 0
        idx = np.where(fresh, 0, source)
        for d in (self.m, self.v):
            for k, arr in d.items():
                new = arr[idx] if len(arr) else np.zeros((len(source),) + arr.shape[1:])
                new[fresh] = 0.0
                d[k] = new

    def zero_state(self, key: str, mask=None) -> None:
        for d in (self.m, self.v):
            if mask is None:
                d[key][:] = 0.0
            else:
                d[key][mask] = 0.0


def exp_lr(step, lr_init, lr_final, max_steps):
    if max_steps <= 0:
        return lr_final
    t = min(max(step / max_steps, 0.0), 1.0)
    return math.exp((1 - t) * math.log(lr_init) + t * math.log(lr_final))


# ------------------------------------------------------------------------ config

@dataclass
class TrainConfig:
    iterations: int = 30000
    lambda_dssim: float = 0.2
    lr_position_init: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_sh: float = 2.5e-3
    lr_opacity: float = 0.05
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    sh_degree: int = 3
    sh_degree_interval: int = 1000
    seed: int = 0
    eval_interval: int = 1000
    checkpoint_interval: int = 0
    texture_aware: bool = True
    vdrc: bool = True
    normal_guide: bool = True
    guide_with_weight: bool = False
    alpha_s: float = ALPHA_S
    beta_s: float = BETA_S
    t_start: float = T_START
    t_end: float = T_END
    holdout_every: int = 8
    background: tuple = (0.0, 0.0, 0.0)
    adc: AdcConfig = field(default_factory=AdcConfig)

    def __post_init__(self):
        if not 0.0 <= self.lambda_dssim <= 1.0:
            raise ValueError("lambda_dssim must lie in [0, 1]")
        for name in ("lr_position_init", "lr_position_final", "lr_sh", "lr_opacity", "lr_scale",
                     "lr_rotation"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if isinstance(self.adc, dict):
            self.adc = AdcConfig(**self.adc)
        self.background = tuple(self.background)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    @classmethod
    def scaled(cls, iterations: int, **overrides) -> "TrainConfig":
        """Defaults with the densification schedule shrunk proportionally to ``iterations``."""
        f = max(iterations, 1) / 30000.0
        adc = AdcConfig(
            densify_from=max(int(round(500 * f)), 1),
            densify_until=max(int(round(15000 * f)), 2),
            opacity_reset_interval=max(int(round(3000 * f)), 1),
        )
        if adc.densify_until <= adc.densify_from:
            adc.densify_until = adc.densify_from + 1
        adc_over = overrides.pop("adc", None)
        if adc_over:
            for k, v in adc_over.items():
                setattr(adc, k, v)
        base = dict(iterations=iterations, adc=adc,
                    sh_degree_interval=max(int(round(1000 * f)), 1),
                    eval_interval=max(iterations // 10, 1))
        base.update(overrides)
        return cls(**base)


def scene_extent(views) -> float:
    """1.1 x the largest camera distance from the mean centre; 1.0 when all centres coincide."""
    centers = np.stack([v.center for v in views])
    r = 1.1 * float(np.linalg.norm(centers - centers.mean(axis=0), axis=1).max())
    return r if r > 0 else 1.0


def split_views(views, holdout_every: int):
    if holdout_every <= 0 or len(views) < 2:
        return list(range(len(views))), []
    test = [i for i in range(len(views)) if i % holdout_every == 0]
    train = [i for i in range(len(views)) if i % holdout_every != 0]
    return train, test


# ------------------------------------------------------------------- checkpoints

def save_checkpoint(splats: SplatSet, iteration: int, out_dir, tag: Optional[str] = None) -> Path:
    from .scene_io import export_ply

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tag = tag or f"iter_{iteration:06d}"
    ply = out / f"{tag}.ply"
    export_ply(splats, ply)
    side = {
        "iteration": int(iteration),
        "sh_degree": int(splats.sh_degree),
        "ref_view": splats.ref_view.tolist(),
        "max_weight": [repr(float(x)) for x in splats.max_weight],
        "init_ref_view": splats.init_ref_view.tolist(),
        "init_depth_ratio": [repr(float(x)) for x in splats.init_depth_ratio],
    }
    with open(out / f"{tag}.json", "w") as fh:
        json.dump(side, fh)
    return ply


def load_checkpoint(ply_path) -> tuple:
    from .scene_io import import_ply

    ply_path = Path(ply_path)
    side_path = ply_path.with_suffix(".json")
    side = json.loads(side_path.read_text()) if side_path.exists() else {}
    splats = import_ply(ply_path, side.get("sh_degree"))
    if side:
        splats.ref_view = np.array(side["ref_view"], dtype=np.int64)
        splats.max_weight = np.array([float(x) for x in side["max_weight"]])
        splats.init_ref_view = np.array(side["init_ref_view"], dtype=np.int64)
        splats.init_depth_ratio = np.array([float(x) for x in side["init_depth_ratio"]])
    return splats, side.get("iteration", 0)


# ------------------------------------------------------------------------ training

@dataclass
class TrainResult:
    scene: Scene
    metrics: list
    decisions: list
    train_ids: list
    test_ids: list


METRIC_HEADER = ["iteration", "loss", "psnr", "ssim", "splats"]


def evaluate(splats: SplatSet, views, ids, sh_degree=None, bg=None):
    if not ids:
        return float("nan"), float("nan")
    ps, ss = [], []
    for i in ids:
        out = render(splats, views[i], sh_degree=sh_degree, bg=bg)
        img = np.clip(out.color, 0.0, 1.0)
        ps.append(psnr(img, views[i].image))
        ss.append(ssim(img, views[i].image))
    return float(np.mean(ps)), float(np.mean(ss))


def prepare_maps(views, cfg: TrainConfig):
    """(texture weight maps, guidance maps) per view."""
    weights, guides = [], []
    for v in views:
        g = gradient_map(v.image)
        w = texture_weight(g, cfg.alpha_s, cfg.beta_s)
        weights.append(w if cfg.texture_aware else np.ones_like(g))
        guides.append(w if cfg.guide_with_weight else g)
    return weights, guides


def train(scene: Scene, cfg: TrainConfig, out_dir=None, metrics_path=None, decisions_path=None,
          progress=None) -> TrainResult:
    """Optimise ``scene.splats`` in place against the images of ``scene.views``."""
    views = scene.views
    splats = scene.splats
    rng = np.random.default_rng(cfg.seed)
    train_ids, test_ids = split_views(views, cfg.holdout_every)
    extent = scene_extent(views)
    bg = np.asarray(cfg.background, dtype=np.float64)
    weights, guides = prepare_maps(views, cfg)
    vdrc = cfg.vdrc and all(v.depth_prior is not None for v in views)
    if cfg.vdrc and not vdrc:
        log.warning("depth priors missing; depth-ratio validation disabled")
    adc = cfg.adc

    lrs = dict(mu=cfg.lr_position_init * extent, rot=cfg.lr_rotation, scale=cfg.lr_scale,
               opacity=cfg.lr_opacity, sh=cfg.lr_sh, sh_rest=cfg.lr_sh / 20.0)
    opt = Adam(splats, lrs)
    stats = DensifyStats.zeros(len(splats))
    metrics, decisions = [], []
    order: list = []
    active_deg = 0 if cfg.sh_degree_interval > 0 else splats.sh_degree
    running, n_running = 0.0, 0

    if metrics_path is not None:
        Path(metrics_path).parent.mkdir(parents=True, exist_ok=True)
        mfh = open(metrics_path, "w", newline="")
        mw = csv.writer(mfh)
        mw.writerow(METRIC_HEADER)
    else:
        mfh = mw = None

    def log_metrics(it, loss_val):
        p, s = evaluate(splats, views, test_ids, active_deg, bg)
        row = [it, loss_val, p, s, len(splats)]
        metrics.append(row)
        if mw is not None:
            mw.writerow([it, repr(loss_val), repr(p), repr(s), len(splats)])
            mfh.flush()
        if progress:
            progress(row)

    try:
        log_metrics(scene.iteration, float("nan"))
        for it in range(scene.iteration + 1, cfg.iterations + 1):
            scene.iteration = it
            opt.lrs["mu"] = exp_lr(it, cfg.lr_position_init * extent,
                                   cfg.lr_position_final * extent, cfg.iterations)
            if cfg.sh_degree_interval > 0 and it % cfg.sh_degree_interval == 0:
                active_deg = min(active_deg + 1, splats.sh_degree)
            if not order:
                order = list(rng.permutation(train_ids))
            vid = int(order.pop())
            view = views[vid]

            out = render(splats, view, weights[vid], bg=bg, sh_degree=active_deg, view_id=vid)
            loss, dL = compute_loss(out.color, view.image, cfg.lambda_dssim)
            if not np.isfinite(loss):
                if out_dir is not None:
                    save_checkpoint(splats, it, out_dir, tag="abort")
                raise NumericAbort(f"non-finite loss at iteration {it}")
            running += loss
            n_running += 1
            grads = render_backward(splats, view, dL, out)
            update_reference_view(splats, vid, out.per_splat_max_weight)

            in_window = it <= adc.densify_until
            if in_window:
                gn = grads.viewspace_norm(view.width, view.height)
                stats.add_view(vid, out, gn, grads.mu)

            opt.step(splats, grads)
            splats.normalize_rotations()

            if in_window and it > adc.densify_from and it % adc.densify_interval == 0:
                thr = adaptive_threshold(it, adc.densify_from, adc.densify_until, cfg.t_start,
                                         cfg.t_end)
                blur = select_blur_splats(stats, thr)
                res = adc_step(splats, stats, blur, adc, views, guides, extent, iteration=it,
                               seed=cfg.seed, vdrc=vdrc, normal_guide=cfg.normal_guide,
                               clone_step=opt.lrs["mu"])
                decisions.extend(res.decisions)
                splats = res.splats
                scene.splats = splats
                opt.remap(res.source)
                stats = DensifyStats.zeros(len(splats))
                log.info("iter %d: %d cloned, %d split, %d excluded, %d children rejected, "
                         "%d pruned -> %d splats", it, res.n_cloned, res.n_split, res.n_excluded,
                         res.n_rejected_children, res.n_pruned, len(splats))
            if cfg.eval_interval > 0 and (it % cfg.eval_interval == 0 or it == cfg.iterations):
                log_metrics(it, running / max(n_running, 1))
                running, n_running = 0.0, 0
            if in_window and it % adc.opacity_reset_interval == 0:
                reset_opacity(splats)
                opt.zero_state("opacity")
            if out_dir is not None and cfg.checkpoint_interval > 0 and \
                    it % cfg.checkpoint_interval == 0:
                save_checkpoint(splats, it, out_dir)
    finally:
        if mfh is not None:
            mfh.close()
    if decisions_path is not None:
        from .geosplit import write_decisions
        write_decisions(decisions_path, decisions)
    return TrainResult(scene, metrics, decisions, train_ids, test_ids)
