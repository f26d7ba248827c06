"""Synthetic piecewise-planar datasets with exact ground truth, plus quality and geometry metrics.

Scene files are JSON::

    {
      "name": "door-wall",
      "image_size": [80, 60],            # width, height
      "focal": 70.0,                     # pixels; principal point at the image centre
      "cameras": {"type": "orbit", "count": 12, "target": [0, 2.5, 1], "radius": 4.5,
                  "height": 1.2, "start_deg": -35, "end_deg": 35}
                 | {"type": "grid", "nx": 4, "ny": 3, "spacing": 0.4, "origin": [...],
                    "target": [...]},
      "surfaces": [
        {"type": "rect", "center": [...], "u": [...], "v": [...], "half": [hu, hv],
         "texture": {...}, "textured": true},
        {"type": "box", "center": [...], "size": [sx, sy, sz], "texture": {...},
         "textured": false}
      ],
      "depth_scale": 1.0,                # multiplier on emitted depth priors
      "depth_noise": 0.0,                # relative Gaussian noise on depth priors
      "sfm": {"count": 800, "floor": 0.03, "outlier_fraction": 0.05, "reproj_sigma": 0.3},
      "supersample": 2,
      "seed": 0
    }

Textures: ``{"kind": "flat", "color": [r, g, b]}``,
``{"kind": "checker", "period": p, "colors": [[...], [...]]}``,
``{"kind": "noise", "cell": c, "colors": [[...], [...]], "seed": s}`` (smooth value noise) and
``{"kind": "image", "path": "file.png"}`` (stretched over the face).
The world is z-up; cameras follow the OpenCV convention (x right, y down, z forward).
"""

from __future__ import annotations

import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .core import CameraView
from .scene_io import SfmPoint, write_colmap, write_pfm, write_png
from .trainer import psnr  # noqa: F401  (re-exported metric)

UP = np.array([0.0, 0.0, 1.0])
FIXTURE_DIR = Path(__file__).parent / "fixtures"


class GenerationError(RuntimeError):
    pass


# ------------------------------------------------------------------ textures

class Texture:
    def __init__(self, spec: dict, base_dir: Optional[Path] = None, half=(1.0, 1.0)):
        self.kind = spec.get("kind", "flat")
        self.half = half
        if self.kind == "flat":
            self.color = np.asarray(spec.get("color", [0.5, 0.5, 0.5]), dtype=np.float64)
        elif self.kind == "checker":
            self.period = float(spec["period"])
            self.colors = np.asarray(spec.get("colors", [[0.1, 0.1, 0.1], [0.9, 0.9, 0.9]]), float)
        elif self.kind == "noise":
            self.cell = float(spec["cell"])
            self.colors = np.asarray(spec.get("colors", [[0.2, 0.2, 0.2], [0.8, 0.8, 0.8]]), float)
            rng = np.random.default_rng(spec.get("seed", 0))
            n = int(np.ceil(2 * max(half) / self.cell)) + 3
            self.lattice = rng.uniform(size=(n, n))
        elif self.kind == "image":
            from .scene_io import read_png

            path = Path(spec["path"])
            if not path.is_absolute() and base_dir is not None:
                path = base_dir / path
            self.image = read_png(path)
        else:
            raise GenerationError(f"unknown texture kind {self.kind!r}")

    def __call__(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Colour at in-plane coordinates (a, b), each in [-half, half]."""
        if self.kind == "flat":
            return np.broadcast_to(self.color, a.shape + (3,)).copy()
        if self.kind == "checker":
            k = (np.floor(a / self.period) + np.floor(b / self.period)).astype(np.int64) % 2
            return self.colors[k]
        if self.kind == "noise":
            x = (a + self.half[0]) / self.cell
            y = (b + self.half[1]) / self.cell
            i = np.clip(np.floor(x).astype(np.int64), 0, self.lattice.shape[0] - 2)
            j = np.clip(np.floor(y).astype(np.int64), 0, self.lattice.shape[1] - 2)
            fx = x - i
            fy = y - j
            fx = fx * fx * (3 - 2 * fx)
            fy = fy * fy * (3 - 2 * fy)
            L = self.lattice
            v = (L[i, j] * (1 - fx) * (1 - fy) + L[i + 1, j] * fx * (1 - fy)
                 + L[i, j + 1] * (1 - fx) * fy + L[i + 1, j + 1] * fx * fy)
            return self.colors[0] + (self.colors[1] - self.colors[0]) * v[..., None]
        h, w = self.image.shape[:2]
        col = np.clip(((a / self.half[0] + 1) / 2 * w).astype(np.int64), 0, w - 1)
        row = np.clip(((1 - (b / self.half[1] + 1) / 2) * h).astype(np.int64), 0, h - 1)
        return self.image[row, col]


@dataclass
class Rect:
    center: np.ndarray
    u: np.ndarray
    v: np.ndarray
    half: tuple
    textured: bool
    texture: Optional[Texture] = None
    name: str = ""

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.u, self.v)

    @property
    def area(self) -> float:
        return 4.0 * self.half[0] * self.half[1]

    def local(self, p):
        d = np.asarray(p, dtype=np.float64) - self.center
        return d @ self.u, d @ self.v, d @ self.normal

    def distance(self, p) -> np.ndarray:
        a, b, h = self.local(p)
        da = np.maximum(np.abs(a) - self.half[0], 0.0)
        db = np.maximum(np.abs(b) - self.half[1], 0.0)
        return np.sqrt(da * da + db * db + h * h)

    def to_dict(self) -> dict:
        return {"center": self.center.tolist(), "u": self.u.tolist(), "v": self.v.tolist(),
                "half": list(self.half), "textured": bool(self.textured), "name": self.name}

    @classmethod
    def from_dict(cls, d) -> "Rect":
        return cls(np.asarray(d["center"], float), np.asarray(d["u"], float),
                   np.asarray(d["v"], float), tuple(d["half"]), bool(d["textured"]),
                   name=d.get("name", ""))


def _orthonormal(u, v):
    u = np.asarray(u, dtype=np.float64)
    u = u / np.linalg.norm(u)
    v = np.asarray(v, dtype=np.float64)
    v = v - (v @ u) * u
    n = np.linalg.norm(v)
    if n < 1e-9:
        raise GenerationError("degenerate surface axes")
    return u, v / n


def build_surfaces(specs, base_dir=None) -> list:
    rects = []
    for k, s in enumerate(specs):
        kind = s.get("type", "rect")
        name = s.get("name", f"{kind}{k}")
        if kind == "rect":
            u, v = _orthonormal(s["u"], s["v"])
            half = tuple(float(h) for h in s["half"])
            if min(half) <= 0:
                raise GenerationError(f"surface {name} has a non-positive extent")
            rects.append(Rect(np.asarray(s["center"], float), u, v, half, bool(s["textured"]),
                              Texture(s.get("texture", {}), base_dir, half), name))
        elif kind == "box":
            c = np.asarray(s["center"], float)
            sx, sy, sz = (0.5 * float(x) for x in s["size"])
            if min(sx, sy, sz) <= 0:
                raise GenerationError(f"box {name} has a non-positive size")
            ex, ey, ez = np.eye(3)
            faces = [
                (c + sx * ex, ey, ez, (sy, sz)), (c - sx * ex, ez, ey, (sz, sy)),
                (c + sy * ey, ez, ex, (sz, sx)), (c - sy * ey, ex, ez, (sx, sz)),
                (c + sz * ez, ex, ey, (sx, sy)), (c - sz * ez, ey, ex, (sy, sx)),
            ]
            for f, (fc, u, v, half) in enumerate(faces):
                rects.append(Rect(fc, u, v, half, bool(s["textured"]),
                                  Texture(s.get("texture", {}), base_dir, half), f"{name}.{f}"))
        else:
            raise GenerationError(f"unknown surface type {kind!r}")
    return rects


def _inside_box(p, s) -> bool:
    c = np.asarray(s["center"], float)
    half = 0.5 * np.asarray(s["size"], float)
    return bool(np.all(np.abs(np.asarray(p) - c) < half))


# ------------------------------------------------------------------- cameras

def look_at(eye, target, up=UP):
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    f /= np.linalg.norm(f)
    x = np.cross(f, up)
    if np.linalg.norm(x) < 1e-9:
        raise GenerationError("camera looks along the up axis")
    x /= np.linalg.norm(x)
    y = np.cross(f, x)
    R = np.stack([x, y, f])
    return R, -R @ eye


def make_cameras(spec: dict, width: int, height: int, focal: float) -> list:
    kind = spec.get("type", "orbit")
    target = np.asarray(spec["target"], dtype=np.float64)
    eyes = []
    if kind == "orbit":
        n = int(spec["count"])
        angles = np.radians(np.linspace(spec.get("start_deg", -30), spec.get("end_deg", 30), n))
        r = float(spec["radius"])
        for a in angles:
            eyes.append(target + np.array([r * np.sin(a), -r * np.cos(a), 0.0])
                        + np.array([0.0, 0.0, float(spec.get("height", 0.0))]))
    elif kind == "grid":
        origin = np.asarray(spec["origin"], dtype=np.float64)
        sp = float(spec["spacing"])
        nx, ny = int(spec["nx"]), int(spec["ny"])
        for j in range(ny):
            for i in range(nx):
                eyes.append(origin + np.array([(i - (nx - 1) / 2) * sp, 0.0, (j - (ny - 1) / 2) * sp]))
    else:
        raise GenerationError(f"unknown camera layout {kind!r}")
    if len(eyes) < 2:
        raise GenerationError("need at least two cameras")
    views = []
    for k, e in enumerate(eyes):
        R, t = look_at(e, target)
        views.append(CameraView(focal, focal, width / 2.0, height / 2.0, R, t, width, height,
                                name=f"view_{k:03d}.png"))
    return views


# ---------------------------------------------------------------- ray casting

def cast(rects, origin, dirs):
    """Nearest hit along rays ``origin + t * dirs``. Returns (t, surface index; -1 = miss)."""
    shape = dirs.shape[:-1]
    d = dirs.reshape(-1, 3)
    best_t = np.full(len(d), np.inf)
    best_k = np.full(len(d), -1, dtype=np.int64)
    for k, r in enumerate(rects):
        n = r.normal
        denom = d @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((r.center - origin) @ n) / denom
        ok = np.abs(denom) > 1e-12
        ok &= t > 1e-9
        p = origin + t[:, None] * d
        a = (p - r.center) @ r.u
        b = (p - r.center) @ r.v
        ok &= (np.abs(a) <= r.half[0]) & (np.abs(b) <= r.half[1])
        better = ok & (t < best_t)
        best_t[better] = t[better]
        best_k[better] = k
    return best_t.reshape(shape), best_k.reshape(shape)


def shade(rects, origin, dirs, t, k, background):
    out = np.broadcast_to(np.asarray(background, float), t.shape + (3,)).copy()
    for idx, r in enumerate(rects):
        m = k == idx
        if not np.any(m):
            continue
        p = origin + t[m][:, None] * dirs[m]
        a, b, _ = r.local(p)
        out[m] = r.texture(a, b)
    return out


def render_gt(rects, cam: CameraView, supersample: int = 1, background=(0.0, 0.0, 0.0)):
    """(image, z-depth at pixel centres (0 = miss), surface index map)."""
    W, H = cam.width, cam.height
    Rt = cam.R.T
    o = cam.center
    acc = np.zeros((H, W, 3))
    ss = max(int(supersample), 1)
    offs = (np.arange(ss) + 0.5) / ss
    for oy in offs:
        for ox in offs:
            u = (np.arange(W) + ox - cam.cu) / cam.fu
            v = (np.arange(H) + oy - cam.cv) / cam.fv
            uu, vv = np.meshgrid(u, v)
            rays = np.stack([uu, vv, np.ones_like(uu)], -1) @ Rt.T
            t, k = cast(rects, o, rays)
            acc += shade(rects, o, rays, t, k, background)
    image = acc / (ss * ss)
    rays = cam.pixel_rays() @ Rt.T
    t, k = cast(rects, o, rays)
    depth = np.where(k >= 0, quantize_depth(t), 0.0)  # unit-z rays, so t is z-depth
    return image, depth, k


def quantize_depth(z, bits: int = 20):
    """Round depths to a power-of-two grid with ``bits`` significant bits.

    Scaling such values by a factor with few significant bits (0.5, 3, ...) stays
    exact in float32, so priors at different depth scales are exactly proportional.
    """
    z = np.asarray(z, dtype=np.float64)
    finite = np.isfinite(z)
    if not finite.any():
        return z
    top = np.abs(z[finite]).max()
    if top == 0:
        return z
    q = 2.0 ** (np.ceil(np.log2(top)) - bits)
    return np.where(finite, np.round(z / q) * q, z)


# ------------------------------------------------------------------------ SfM

def _feature_strength(rect: Rect, a, b, radius):
    c0 = rect.texture(a, b) @ np.array([0.299, 0.587, 0.114])
    diff = np.zeros_like(c0)
    for da, db in ((radius, 0), (-radius, 0), (0, radius), (0, -radius)):
        c = rect.texture(np.clip(a + da, -rect.half[0], rect.half[0]),
                         np.clip(b + db, -rect.half[1], rect.half[1])) @ np.array([0.299, 0.587, 0.114])
        diff = np.maximum(diff, np.abs(c - c0))
    return np.clip(diff / 0.25, 0.0, 1.0)


def _visible_views(rects, views, p, tol=1e-6):
    out = []
    for vid, cam in enumerate(views):
        pc = cam.to_camera(p)
        if pc[2] <= 1e-6:
            continue
        x = cam.project(pc)
        if not (0 <= x[0] < cam.width and 0 <= x[1] < cam.height):
            continue
        ray = (p - cam.center) / pc[2]
        t, k = cast(rects, cam.center, ray[None])
        if k[0] < 0 or t[0] < pc[2] * (1 - 1e-6) - tol:
            continue
        out.append((vid, x))
    return out


def sample_sfm(rects, views, cfg: dict, rng: np.random.Generator):
    count = int(cfg.get("count", 800))
    floor = float(cfg.get("floor", 0.03))
    sigma = float(cfg.get("reproj_sigma", 0.3))
    radius = float(cfg.get("feature_radius", 0.03))
    outlier_fraction = float(cfg.get("outlier_fraction", 0.05))
    areas = np.array([r.area for r in rects])
    points = []
    pid = 1
    n_in = int(round(count * (1 - outlier_fraction)))
    tries = 0
    while len(points) < n_in and tries < 200:
        tries += 1
        m = 4 * count
        k = rng.choice(len(rects), size=m, p=areas / areas.sum())
        a = rng.uniform(-1, 1, m)
        b = rng.uniform(-1, 1, m)
        for idx in range(m):
            if len(points) >= n_in:
                break
            r = rects[k[idx]]
            aa, bb = a[idx] * r.half[0], b[idx] * r.half[1]
            s = _feature_strength(r, np.array([aa]), np.array([bb]), radius)[0]
            if rng.uniform() > floor + (1 - floor) * s:
                continue
            p = r.center + aa * r.u + bb * r.v
            vis = _visible_views(rects, views, p)
            if len(vis) < 2:
                continue
            track, errs = [], []
            for vid, x in vis:
                e = abs(rng.normal(0.0, sigma))
                ang = rng.uniform(0, 2 * np.pi)
                track.append((vid, (x[0] + e * np.cos(ang), x[1] + e * np.sin(ang))))
                errs.append(e)
            color = r.texture(np.array([aa]), np.array([bb]))[0]
            points.append(SfmPoint(p, color, track, float(np.mean(errs)), point_id=pid))
            pid += 1
    n_out = count - n_in
    for _ in range(n_out):
        vid = int(rng.integers(len(views)))
        cam = views[vid]
        x = np.array([rng.uniform(0, cam.width), rng.uniform(0, cam.height)])
        ray = cam.R.T @ np.array([(x[0] - cam.cu) / cam.fu, (x[1] - cam.cv) / cam.fv, 1.0])
        t, k = cast(rects, cam.center, ray[None])
        if k[0] < 0:
            continue
        p = cam.center + t[0] * rng.uniform(0.3, 0.8) * ray
        track = []
        errs = []
        others = rng.permutation(len(views))[: int(rng.integers(2, 5))]
        for v in others:
            c = views[v]
            pc = c.to_camera(p)
            if pc[2] <= 0:
                continue
            e = rng.uniform(1.0, 3.0)
            proj = c.project(pc)
            track.append((int(v), (proj[0] + e, proj[1])))
            errs.append(e)
        if not track:
            continue
        points.append(SfmPoint(p, np.array([0.5, 0.5, 0.5]), track, float(np.mean(errs)),
                               point_id=pid))
        pid += 1
    return points


# ------------------------------------------------------------------ generation

@dataclass
class SyntheticSceneSpec:
    surfaces: list
    cameras: dict
    image_size: tuple = (80, 60)
    focal: float = 70.0
    depth_scale: float = 1.0
    depth_noise: float = 0.0
    sfm: dict = field(default_factory=dict)
    supersample: int = 2
    background: tuple = (0.0, 0.0, 0.0)
    seed: int = 0
    name: str = "scene"
    base_dir: Optional[str] = None

    def __post_init__(self):
        if self.depth_scale <= 0:
            raise GenerationError("depth_scale must be positive")

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> "SyntheticSceneSpec":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        known["image_size"] = tuple(known.get("image_size", (80, 60)))
        known.setdefault("base_dir", None if base_dir is None else str(base_dir))
        return cls(**known)

    @classmethod
    def load(cls, path) -> "SyntheticSceneSpec":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), base_dir=path.parent)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "base_dir"}
        d["image_size"] = list(self.image_size)
        d["background"] = list(self.background)
        return d


def fixture_path(name: str) -> Path:
    return FIXTURE_DIR / f"{name}.json"


def load_fixture(name: str, **overrides) -> SyntheticSceneSpec:
    spec = SyntheticSceneSpec.load(fixture_path(name))
    for k, v in overrides.items():
        setattr(spec, k, v)
    return spec


def generate(spec: SyntheticSceneSpec, out_dir) -> Path:
    """Write a dataset: images/, depths/, sparse/0/ (COLMAP text), gt/ and scene.json."""
    out = Path(out_dir)
    base = Path(spec.base_dir) if spec.base_dir else None
    rects = build_surfaces(spec.surfaces, base)
    W, H = spec.image_size
    views = make_cameras(spec.cameras, int(W), int(H), float(spec.focal))
    for cam in views:
        c = cam.center
        for s in spec.surfaces:
            if s.get("type") == "box" and _inside_box(c, s):
                raise GenerationError(f"camera {cam.name} is inside {s.get('name', 'a box')}")
        for r in rects:
            if np.min(r.distance(c[None])) < 1e-6:
                raise GenerationError(f"camera {cam.name} lies on surface {r.name}")

    rng = np.random.default_rng(spec.seed)
    noise_rng = np.random.default_rng([spec.seed, 1])
    if out.exists():
        shutil.rmtree(out)
    for sub in ("images", "depths", "gt/masks", "sparse/0"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    labels = np.array([255 if r.textured else 128 for r in rects] + [0], dtype=np.uint8)
    for cam in views:
        img, depth, k = render_gt(rects, cam, spec.supersample, spec.background)
        write_png(out / "images" / cam.name, img)
        prior = depth * spec.depth_scale
        if spec.depth_noise > 0:
            prior = prior * (1.0 + spec.depth_noise * noise_rng.standard_normal(prior.shape))
        write_pfm(out / "depths" / f"{Path(cam.name).stem}.pfm", np.where(depth > 0, prior, 0.0))
        from PIL import Image

        Image.fromarray(labels[k]).save(out / "gt" / "masks" / cam.name)

    points = sample_sfm(rects, views, spec.sfm, rng)
    write_colmap(out / "sparse" / "0", views, points)
    with open(out / "gt" / "surfaces.json", "w") as fh:
        json.dump([r.to_dict() for r in rects], fh, indent=1)
    with open(out / "scene.json", "w") as fh:
        json.dump(spec.to_dict(), fh, indent=1)
    return out


def load_surfaces(dataset_dir) -> list:
    data = json.loads((Path(dataset_dir) / "gt" / "surfaces.json").read_text())
    return [Rect.from_dict(d) for d in data]


# ------------------------------------------------------------------- metrics

def point_surface_distances(points, rects) -> np.ndarray:
    """(N, S) distance of every point to every surface."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return np.stack([r.distance(pts) for r in rects], axis=1)


def surface_fit_error(points, rects, eps: Optional[float] = None) -> dict:
    """Point-to-nearest-surface distance statistics for splat centres."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("no splats to evaluate")
    d = point_surface_distances(pts, rects).min(axis=1)
    out = {"mean": float(d.mean()), "median": float(np.median(d)),
           "p95": float(np.percentile(d, 95)), "max": float(d.max())}
    if eps is not None:
        out["frac_beyond"] = float((d > eps).mean())
        out["eps"] = float(eps)
    return out


def density_ratio(points, rects) -> float:
    """Splats per unit area on textured surfaces over splats per unit area on textureless ones.

    Each splat is attributed to its nearest surface. Returns inf when no splat
    lands on a textureless surface and nan when there is no textureless surface.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    tex = np.array([r.textured for r in rects])
    area_t = sum(r.area for r in rects if r.textured)
    area_f = sum(r.area for r in rects if not r.textured)
    if area_f == 0 or area_t == 0:
        return float("nan")
    nearest = point_surface_distances(pts, rects).argmin(axis=1) if len(pts) else np.zeros(0, int)
    n_t = int(tex[nearest].sum())
    n_f = len(nearest) - n_t
    if n_f == 0:
        return float("inf")
    return (n_t / area_t) / (n_f / area_f)
