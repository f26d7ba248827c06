"""Command-line entry point: ``geotex synth | train | render | eval``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .core import CameraView, Scene
from .scene_io import (FormatError, filter_sfm_points, parse_colmap, splats_from_points,
                       write_pfm, write_png)
from .trainer import (NumericAbort, TrainConfig, evaluate, load_checkpoint, psnr,
                      save_checkpoint, scene_extent, split_views, train)

log = logging.getLogger("geotex")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


@dataclass
class RunManifest:
    dataset: str
    out_dir: str
    seed: int
    config: dict
    toggles: dict
    min_track: int = 3
    max_reproj: float = 1.0
    threads: Optional[int] = None
    notes: list = field(default_factory=list)

    def write(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=1)

    @classmethod
    def read(cls, path) -> "RunManifest":
        try:
            return cls(**json.loads(Path(path).read_text()))
        except (TypeError, json.JSONDecodeError) as e:
            raise ConfigError(f"bad manifest {path}: {e}") from e


def load_scene(dataset, sh_degree: int = 3, min_track: int = 3, max_reproj: float = 1.0) -> Scene:
    """Parse a COLMAP dataset and initialise splats from its filtered SfM points."""
    views, points = parse_colmap(dataset)
    for v in views:
        if v.image is None:
            raise FormatError(f"missing image for view {v.name}")
    kept = filter_sfm_points(points, views, min_track, max_reproj)
    if not kept:
        raise FormatError("no SfM points survive filtering")
    return Scene(splats_from_points(kept, sh_degree), views)


def _config_from_args(args) -> TrainConfig:
    over = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            from .synth import fixture_path

            if fixture_path(args.config).exists():
                path = fixture_path(args.config)
        try:
            over = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {args.config}: {e}") from e
    iterations = args.iterations if args.iterations is not None else over.pop("iterations", 30000)
    over.pop("iterations", None)
    if iterations < 0:
        raise ConfigError("--iterations must be non-negative")
    if args.seed is not None:
        over["seed"] = args.seed
    if args.sh_degree is not None:
        over["sh_degree"] = args.sh_degree
    if args.no_texture_aware:
        over["texture_aware"] = False
    if args.no_vdrc:
        over["vdrc"] = False
    if args.no_normal_guide:
        over["normal_guide"] = False
    try:
        return TrainConfig.scaled(iterations, **over)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def _set_threads(n: Optional[int]) -> None:
    if n:
        import numba

        numba.set_num_threads(n)


def cmd_synth(args) -> int:
    from .synth import SyntheticSceneSpec, fixture_path, generate

    spec_path = Path(args.spec)
    if not spec_path.exists() and fixture_path(args.spec).exists():
        spec_path = fixture_path(args.spec)
    try:
        spec = SyntheticSceneSpec.load(spec_path)
    except (OSError, json.JSONDecodeError, TypeError) as e:
        raise ConfigError(f"cannot read scene spec {args.spec}: {e}") from e
    if args.depth_scale is not None:
        spec.depth_scale = args.depth_scale
        spec.__post_init__()
    out = generate(spec, args.out)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.manifest:
        m = RunManifest.read(args.manifest)
        cfg = TrainConfig.from_dict(dict(m.config))
        m.out_dir = str(out)
        m.notes = []
        dataset = m.dataset
    else:
        if not args.dataset:
            raise ConfigError("a dataset directory or --manifest is required")
        cfg = _config_from_args(args)
        dataset = str(Path(args.dataset).resolve())
        m = RunManifest(dataset, str(out), cfg.seed, cfg.to_dict(),
                        dict(texture_aware=cfg.texture_aware, vdrc=cfg.vdrc,
                             normal_guide=cfg.normal_guide),
                        threads=args.threads)
    _set_threads(m.threads)
    scene = load_scene(dataset, cfg.sh_degree, m.min_track, m.max_reproj)
    if cfg.vdrc and any(v.depth_prior is None for v in scene.views):
        log.warning("some views have no depth prior; depth-ratio validation disabled")
        cfg.vdrc = False
        m.toggles["vdrc"] = False
        m.notes.append("vdrc auto-disabled: missing depth priors")
    m.config = cfg.to_dict()
    m.write(out / "manifest.json")
    save_checkpoint(scene.splats, 0, out, tag="init")
    try:
        res = train(scene, cfg, out_dir=out, metrics_path=out / "metrics.csv",
                    decisions_path=out / "decisions.csv",
                    progress=(lambda r: print("iter {} loss {:.5f} psnr {:.3f} ssim {:.4f} "
                                              "splats {}".format(*r))) if args.verbose else None)
    except NumericAbort as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    save_checkpoint(res.scene.splats, res.scene.iteration, out, tag="final")
    last = res.metrics[-1]
    print(f"done: {last[4]} splats, held-out PSNR {last[2]:.3f} dB, SSIM {last[3]:.4f}")
    return EXIT_OK


def _camera_from_json(path) -> CameraView:
    d = json.loads(Path(path).read_text())
    try:
        return CameraView(d["fu"], d["fv"], d["cu"], d["cv"], np.asarray(d["R"], float),
                          np.asarray(d["t"], float), int(d["width"]), int(d["height"]),
                          name=d.get("name", "camera"))
    except KeyError as e:
        raise ConfigError(f"camera file lacks {e}") from e


def cmd_render(args) -> int:
    from .rasterizer import render
    from .texture import gradient_map, texture_weight

    splats, _ = load_checkpoint(args.checkpoint)
    if args.camera:
        cam = _camera_from_json(args.camera)
    elif args.dataset is not None and args.view is not None:
        views, _ = parse_colmap(args.dataset)
        names = [v.name for v in views]
        idx = names.index(args.view) if args.view in names else int(args.view)
        cam = views[idx]
    else:
        raise ConfigError("render needs --camera or --dataset with --view")
    out = render(splats, cam)
    img = np.clip(out.color, 0.0, 1.0)
    write_png(args.out, img)
    if args.depth:
        write_pfm(args.depth, out.depth)
    if args.weight_map:
        src = cam.image if cam.image is not None else img
        write_png(args.weight_map, texture_weight(gradient_map(src)))
    if cam.image is not None:
        print(f"PSNR vs ground truth: {psnr(img, cam.image):.3f} dB")
    return EXIT_OK


def eval_table(splats, dataset, split: str = "test", holdout_every: int = 8) -> dict:
    """Metrics for a checkpoint on a dataset split; adds geometry stats when GT surfaces exist."""
    views, _ = parse_colmap(dataset)
    train_ids, test_ids = split_views(views, holdout_every)
    ids = {"test": test_ids, "train": train_ids, "all": list(range(len(views)))}.get(split)
    if ids is None:
        raise ConfigError(f"unknown split {split!r}")
    p, s = evaluate(splats, views, ids)
    table = {"split": split, "views": len(ids), "psnr": p, "ssim": s, "splats": len(splats)}
    gt = Path(dataset) / "gt" / "surfaces.json"
    if gt.exists() and len(splats):
        from .synth import density_ratio, load_surfaces, surface_fit_error

        rects = load_surfaces(dataset)
        eps = 0.05 * scene_extent(views)
        fit = surface_fit_error(splats.mu, rects, eps)
        table.update({f"fit_{k}": v for k, v in fit.items()})
        table["density_ratio"] = density_ratio(splats.mu, rects)
    return table


def cmd_eval(args) -> int:
    splats, _ = load_checkpoint(args.checkpoint)
    table = eval_table(splats, args.dataset, args.split)
    for k, v in table.items():
        print(f"{k:>16s}  {v}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(table, fh, indent=1)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="geotex", description=__doc__.splitlines()[0])
    ap.add_argument("--log-level", default="WARNING")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("spec", help="scene JSON file or shipped fixture name")
    p.add_argument("out")
    p.add_argument("--depth-scale", type=float)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="optimise splats on a dataset")
    p.add_argument("dataset", nargs="?")
    p.add_argument("out")
    p.add_argument("--manifest", help="re-run from a manifest.json")
    p.add_argument("--config", help="JSON file of training overrides, or a shipped profile "
                   "name such as train-desk")
    p.add_argument("--iterations", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--sh-degree", type=int)
    p.add_argument("--no-texture-aware", action="store_true")
    p.add_argument("--no-vdrc", action="store_true")
    p.add_argument("--no-normal-guide", action="store_true")
    p.add_argument("--threads", type=int)
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("out")
    p.add_argument("--camera", help="JSON camera file")
    p.add_argument("--dataset")
    p.add_argument("--view", help="view index or image name")
    p.add_argument("--depth", help="also write expected depth as PFM")
    p.add_argument("--weight-map", help="also write the texture weight map as PNG")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--split", default="test", choices=["test", "train", "all"])
    p.add_argument("--out", help="write the table as JSON")
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv=None) -> int:
    from .synth import GenerationError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, GenerationError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError, ValueError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericAbort as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
