"""COLMAP text ingestion, prior maps, SfM filtering and PLY splat files."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from plyfile import PlyData, PlyElement

from .core import (
    NO_VIEW, CameraView, SplatSet, num_sh_coeffs, quat_to_rotmat, rotmat_to_quat,
)
from .geosplit import depth_ratio

log = logging.getLogger(__name__)


class FormatError(ValueError):
    pass


class UnsupportedFormatError(FormatError):
    pass


class ParseError(FormatError):
    def __init__(self, path, lineno, msg):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.lineno = lineno


@dataclass
class SfmPoint:
    position: np.ndarray
    color: np.ndarray
    track: list  # [(view index, (u, v) keypoint pixel)]
    reproj_error: float
    point_id: int = -1
    init_ref_view: int = NO_VIEW
    init_depth_ratio: float = float("nan")

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.color = np.asarray(self.color, dtype=np.float64)
        if not self.track:
            raise FormatError(f"SfM point {self.point_id} has an empty track")
        if self.reproj_error < 0:
            raise FormatError(f"SfM point {self.point_id} has negative reprojection error")


@dataclass
class PriorMaps:
    depth: np.ndarray
    normal: np.ndarray
    valid_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.valid_mask is None:
            self.valid_mask = np.isfinite(self.depth) & (self.depth > 0)


# ---------------------------------------------------------------- COLMAP text

def _data_lines(path: Path):
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if line and not line.startswith("#"):
                yield lineno, line


def _floats(path, lineno, parts):
    try:
        return [float(p) for p in parts]
    except ValueError as exc:
        raise ParseError(path, lineno, str(exc)) from None


def read_cameras_txt(path: Path) -> dict:
    cams = {}
    for lineno, line in _data_lines(path):
        parts = line.split()
        if len(parts) < 4:
            raise ParseError(path, lineno, "camera line needs CAMERA_ID MODEL WIDTH HEIGHT PARAMS")
        model = parts[1]
        try:
            cam_id, width, height = int(parts[0]), int(parts[2]), int(parts[3])
        except ValueError as exc:
            raise ParseError(path, lineno, str(exc)) from None
        params = _floats(path, lineno, parts[4:])
        if model == "SIMPLE_PINHOLE":
            if len(params) != 3:
                raise ParseError(path, lineno, "SIMPLE_PINHOLE takes 3 parameters")
            f, cx, cy = params
            intr = (f, f, cx, cy)
        elif model == "PINHOLE":
            if len(params) != 4:
                raise ParseError(path, lineno, "PINHOLE takes 4 parameters")
            intr = tuple(params)
        else:
            raise UnsupportedFormatError(f"unsupported camera model {model!r} ({path}:{lineno})")
        cams[cam_id] = (width, height) + intr
    return cams


def read_images_txt(path: Path) -> dict:
    """image_id -> (qvec, tvec, camera_id, name, keypoints (K, 2), point3D ids (K,))."""
    images = {}
    with open(path) as fh:
        lines = fh.read().splitlines()
    i = 0
    while i < len(lines):
        line = lines[i].strip()
        lineno = i + 1
        i += 1
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 10:
            raise ParseError(path, lineno, "image line needs 10 fields")
        try:
            image_id, camera_id = int(parts[0]), int(parts[8])
        except ValueError as exc:
            raise ParseError(path, lineno, str(exc)) from None
        q = np.array(_floats(path, lineno, parts[1:5]))
        t = np.array(_floats(path, lineno, parts[5:8]))
        # the keypoint line always follows its pose line, possibly empty
        vals = lines[i].split() if i < len(lines) else []
        if len(vals) % 3:
            raise ParseError(path, i + 1, "keypoint line needs (X, Y, POINT3D_ID) triples")
        arr = np.array(_floats(path, i + 1, vals)).reshape(-1, 3)
        i += 1
        images[image_id] = (q, t, camera_id, parts[9], arr[:, :2], arr[:, 2].astype(np.int64))
    return images


def read_points3d_txt(path: Path) -> dict:
    """point_id -> (xyz, rgb in [0,1], error, [(image_id, point2D_idx)])."""
    pts = {}
    for lineno, line in _data_lines(path):
        parts = line.split()
        if len(parts) < 8 or (len(parts) - 8) % 2:
            raise ParseError(path, lineno, "point line needs 8 fields plus (IMAGE_ID, POINT2D_IDX) pairs")
        try:
            pid = int(parts[0])
            rgb = [int(c) for c in parts[4:7]]
            track = [(int(parts[k]), int(parts[k + 1])) for k in range(8, len(parts), 2)]
        except ValueError as exc:
            raise ParseError(path, lineno, str(exc)) from None
        xyz = np.array(_floats(path, lineno, parts[1:4]))
        err = _floats(path, lineno, [parts[7]])[0]
        pts[pid] = (xyz, np.array(rgb) / 255.0, err, track)
    return pts


def _sparse_dir(path: Path) -> Path:
    for cand in (path, path / "sparse" / "0", path / "sparse"):
        if (cand / "cameras.txt").exists():
            return cand
    raise FormatError(f"no cameras.txt found under {path}")


def parse_colmap(path, load_images: bool = True):
    """Read a COLMAP text model. Returns (views, sfm_points).

    Views are ordered by image name; track entries refer to positions in that list.
    Images, depth priors (``depths/<stem>.pfm``) and precomputed normals
    (``normals/<stem>.pfm``) are attached when present under the dataset root.
    """
    root = Path(path)
    sparse = _sparse_dir(root)
    cams = read_cameras_txt(sparse / "cameras.txt")
    images = read_images_txt(sparse / "images.txt")
    points = read_points3d_txt(sparse / "points3D.txt")

    ordered = sorted(images.items(), key=lambda kv: kv[1][3])
    index_of = {image_id: i for i, (image_id, _) in enumerate(ordered)}
    views = []
    for image_id, (q, t, camera_id, name, _, _) in ordered:
        if camera_id not in cams:
            raise FormatError(f"image {name} references unknown camera {camera_id}")
        width, height, fu, fv, cu, cv = cams[camera_id]
        view = CameraView(fu, fv, cu, cv, quat_to_rotmat(q), t, width, height, name=name)
        if load_images:
            attach_maps(view, root)
        views.append(view)

    sfm = []
    for pid in sorted(points):
        xyz, rgb, err, track = points[pid]
        obs = []
        for image_id, kp_idx in track:
            if image_id not in images:
                raise FormatError(f"point {pid} observed in unknown image {image_id}")
            kps = images[image_id][4]
            uv = tuple(kps[kp_idx]) if kp_idx < len(kps) else (np.nan, np.nan)
            obs.append((index_of[image_id], uv))
        sfm.append(SfmPoint(xyz, rgb, obs, err, point_id=pid))
    return views, sfm


def normalize_depth(depth: np.ndarray) -> np.ndarray:
    """Divide a scale-free depth map by its largest valid value.

    Depth-ratio checks only compare values within one view, so this changes no
    decision, but it makes the stored map identical for any exactly representable
    rescaling of the input (division is correctly rounded).
    """
    valid = np.isfinite(depth) & (depth > 0)
    if not valid.any():
        return depth
    return np.where(valid, depth / depth[valid].max(), depth)


def attach_maps(view: CameraView, root: Path) -> None:
    stem = Path(view.name).stem
    img = root / "images" / view.name
    if img.exists():
        view.image = read_png(img)
        if view.image.shape[:2] != (view.height, view.width):
            raise FormatError(f"{img}: size does not match its camera")
    depth = root / "depths" / f"{stem}.pfm"
    if depth.exists():
        view.depth_prior = normalize_depth(read_pfm(depth))
        normals = root / "normals" / f"{stem}.pfm"
        if normals.exists():
            view.normal_prior = read_pfm(normals)
        else:
            view.normal_prior, _ = normals_from_depth(view.depth_prior, view)
        view.normal_frame = "camera"


def write_colmap(path, views, points) -> None:
    """Write a COLMAP text model. ``points`` are SfmPoint instances; view ids index ``views``.

    Every view gets its own PINHOLE camera. Floats are written with repr() so a
    read-back is lossless.
    """
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "cameras.txt", "w") as fh:
        fh.write("# Camera list with one line of data per camera:\n")
        fh.write("#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n")
        for i, v in enumerate(views):
            fh.write(f"{i + 1} PINHOLE {v.width} {v.height} {v.fu!r} {v.fv!r} {v.cu!r} {v.cv!r}\n")

    keypoints = [[] for _ in views]
    tracks = []
    for p in points:
        entry = []
        for vid, uv in p.track:
            entry.append((vid + 1, len(keypoints[vid])))
            keypoints[vid].append((uv[0], uv[1], p.point_id))
        tracks.append(entry)

    with open(out / "images.txt", "w") as fh:
        fh.write("# Image list with two lines of data per image:\n")
        fh.write("#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n")
        fh.write("#   POINTS2D[] as (X, Y, POINT3D_ID)\n")
        for i, v in enumerate(views):
            q = rotmat_to_quat(v.R)
            vals = " ".join(repr(float(x)) for x in (*q, *v.t))
            fh.write(f"{i + 1} {vals} {i + 1} {v.name}\n")
            fh.write(" ".join(f"{float(u)!r} {float(w)!r} {pid}" for u, w, pid in keypoints[i]))
            fh.write("\n")

    with open(out / "points3D.txt", "w") as fh:
        fh.write("# 3D point list with one line of data per point:\n")
        fh.write("#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n")
        for p, tr in zip(points, tracks):
            rgb = np.clip(np.round(p.color * 255), 0, 255).astype(int)
            xyz = " ".join(repr(float(x)) for x in p.position)
            track = " ".join(f"{a} {b}" for a, b in tr)
            fh.write(f"{p.point_id} {xyz} {rgb[0]} {rgb[1]} {rgb[2]} {float(p.reproj_error)!r} {track}\n")


# ------------------------------------------------------------------ image maps

def read_pfm(path) -> np.ndarray:
    """Read a PFM file into a top-down float64 array (H, W) or (H, W, 3)."""
    with open(path, "rb") as fh:
        header = fh.readline().strip()
        if header == b"Pf":
            channels = 1
        elif header == b"PF":
            channels = 3
        else:
            raise FormatError(f"{path}: not a PFM file")
        dims = fh.readline().split()
        while not dims:
            dims = fh.readline().split()
        width, height = int(dims[0]), int(dims[1])
        scale = float(fh.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(), dtype=dtype, count=width * height * channels)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return np.flipud(data.reshape(shape)).astype(np.float64)


def write_pfm(path, data: np.ndarray) -> None:
    """Write little-endian PFM, scanlines bottom-up."""
    data = np.asarray(data)
    if data.ndim == 2:
        header = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = b"PF"
    else:
        raise FormatError("PFM holds (H, W) or (H, W, 3) maps")
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(header + b"\n")
        fh.write(f"{w} {h}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(np.flipud(data).astype("<f4").tobytes())


def read_png(path) -> np.ndarray:
    img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    return img / 255.0


def write_png(path, image: np.ndarray) -> None:
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    arr = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(arr).save(path)


# --------------------------------------------------------------- SfM filtering

def observation_errors(point: SfmPoint, views) -> np.ndarray:
    errs = []
    for vid, uv in point.track:
        v = views[vid]
        pc = v.to_camera(point.position)
        if pc[2] <= 0:
            errs.append(np.inf)
            continue
        errs.append(float(np.hypot(*(v.project(pc) - np.asarray(uv)))))
    return np.array(errs)


def filter_sfm_points(points, views, min_track: int = 3, max_reproj: float = 1.0):
    """Keep reliable SfM points and assign each its initial reference view and depth ratio.

    The reference view is the track observation with the smallest reprojection
    error; the depth ratio is taken from that view's depth prior when it has one.
    """
    kept = []
    missing = 0
    for p in points:
        if len(p.track) < min_track or p.reproj_error > max_reproj:
            continue
        errs = observation_errors(p, views)
        vid = int(p.track[int(np.argmin(errs))][0])
        ratio = float("nan")
        view = views[vid]
        if view.depth_prior is None:
            missing += 1
        else:
            r = depth_ratio(p.position, view)
            ratio = float("nan") if r is None else r
        kept.append(SfmPoint(p.position, p.color, list(p.track), p.reproj_error, p.point_id,
                             vid, ratio))
    if missing:
        log.warning("%d SfM points have a reference view without depth prior; "
                    "they skip parent validation", missing)
    return kept


def splats_from_points(points, sh_degree: int = 3, fallback_scale: float = 0.01) -> SplatSet:
    from .core import splats_from_sfm

    if not points:
        return SplatSet.empty(sh_degree)
    s = splats_from_sfm(np.stack([p.position for p in points]),
                        np.stack([p.color for p in points]), sh_degree, fallback_scale)
    s.init_ref_view = np.array([p.init_ref_view for p in points], dtype=np.int64)
    s.init_depth_ratio = np.array([p.init_depth_ratio for p in points])
    s.init_ref_view[~np.isfinite(s.init_depth_ratio)] = NO_VIEW
    s.ref_view = s.init_ref_view.copy()
    return s


# ------------------------------------------------------------------- normals

def normals_from_depth(depth: np.ndarray, cam: CameraView, valid: Optional[np.ndarray] = None):
    """Camera-frame normal map from a depth map. Returns (normals (H, W, 3), valid mask).

    Tangents are central differences of back-projected points; normals face the
    camera. Border pixels and pixels next to invalid depth are masked out.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if valid is None:
        valid = np.isfinite(depth) & (depth > 0)
    # normalising first makes exactly proportional depth maps give bit-identical normals
    top = depth[valid].max() if valid.any() else 1.0
    P = cam.pixel_rays() * np.where(valid, depth / top, 0.0)[..., None]
    H, W = depth.shape
    normals = np.zeros((H, W, 3))
    ok = np.zeros((H, W), dtype=bool)
    if H < 3 or W < 3:
        return normals, ok
    du = P[1:-1, 2:] - P[1:-1, :-2]
    dv = P[2:, 1:-1] - P[:-2, 1:-1]
    n = np.cross(du, dv)
    norm = np.linalg.norm(n, axis=-1)
    inner = (valid[1:-1, 1:-1] & valid[1:-1, 2:] & valid[1:-1, :-2]
             & valid[2:, 1:-1] & valid[:-2, 1:-1])
    scale_ref = np.linalg.norm(du, axis=-1) * np.linalg.norm(dv, axis=-1)
    inner &= norm > 1e-12 * np.maximum(scale_ref, 1e-300)
    n = np.divide(n, norm[..., None], out=np.zeros_like(n), where=inner[..., None])
    facing = np.einsum("hwc,hwc->hw", n, P[1:-1, 1:-1])
    n = np.where((facing > 0)[..., None], -n, n)
    normals[1:-1, 1:-1] = np.where(inner[..., None], n, 0.0)
    ok[1:-1, 1:-1] = inner
    return normals, ok


# ------------------------------------------------------------------------ PLY

N_REST = 45


def ply_property_names():
    names = ["x", "y", "z", "nx", "ny", "nz"]
    names += [f"f_dc_{i}" for i in range(3)]
    names += [f"f_rest_{i}" for i in range(N_REST)]
    names += ["opacity"] + [f"scale_{i}" for i in range(3)] + [f"rot_{i}" for i in range(4)]
    return names


def export_ply(splats: SplatSet, path, dtype: str = "f4") -> None:
    """Binary little-endian PLY in the common 3DGS vertex layout (pre-activation values)."""
    n = len(splats)
    k = splats.sh.shape[1]
    rest = np.zeros((n, 3, 15))
    rest[:, :, : k - 1] = np.transpose(splats.sh[:, 1:, :], (0, 2, 1))
    cols = [splats.mu, np.zeros((n, 3)), splats.sh[:, 0, :], rest.reshape(n, N_REST),
            splats.opacity[:, None], splats.scale, splats.rot]
    data = np.concatenate(cols, axis=1)
    names = ply_property_names()
    arr = np.empty(n, dtype=[(name, dtype) for name in names])
    for i, name in enumerate(names):
        arr[name] = data[:, i]
    PlyData([PlyElement.describe(arr, "vertex")], text=False, byte_order="<").write(str(path))


def import_ply(path, sh_degree: Optional[int] = None) -> SplatSet:
    """Read a 3DGS PLY. Lower-degree files (fewer f_rest_*) are accepted."""
    ply = PlyData.read(str(path))
    if "vertex" not in ply:
        raise FormatError(f"{path}: no vertex element")
    v = ply["vertex"].data
    names = set(v.dtype.names)
    required = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
                "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    missing = [r for r in required if r not in names]
    if missing:
        raise FormatError(f"{path}: missing properties {', '.join(missing)}")
    n_rest = len([nm for nm in names if nm.startswith("f_rest_")])
    if n_rest % 3:
        raise FormatError(f"{path}: f_rest count {n_rest} is not a multiple of 3")
    per_channel = n_rest // 3
    file_degree = int(round(np.sqrt(per_channel + 1))) - 1
    if (file_degree + 1) ** 2 - 1 != per_channel:
        raise FormatError(f"{path}: f_rest count {n_rest} matches no SH degree")
    degree = file_degree if sh_degree is None else sh_degree
    if n_rest == N_REST and sh_degree is None:
        degree = 3
    k = num_sh_coeffs(degree)
    n = len(v)

    def col(name):
        return np.asarray(v[name], dtype=np.float64)

    sh = np.zeros((n, k, 3))
    for c in range(3):
        sh[:, 0, c] = col(f"f_dc_{c}")
    for c in range(3):
        for j in range(min(per_channel, k - 1)):
            sh[:, 1 + j, c] = col(f"f_rest_{c * per_channel + j}")
    mu = np.stack([col("x"), col("y"), col("z")], axis=1)
    scale = np.stack([col(f"scale_{i}") for i in range(3)], axis=1)
    rot = np.stack([col(f"rot_{i}") for i in range(4)], axis=1)
    return SplatSet(mu, rot, scale, col("opacity"), sh)
