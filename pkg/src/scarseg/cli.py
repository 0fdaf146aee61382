"""Command-line surface for the segmentation pipeline.

Subcommands: phantom, prior, segment, baseline-otsu, baseline-gmm, eval,
project.  Every failure path exits with a class-specific nonzero status and
a single-line machine-parsable error on stderr.  Outputs contain no
timestamps, so a fixed seed and config reproduce byte-identical files.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .grid import LabelVolume, VolumeGrid
from .mixture import TissueConfig, classify, init_params
from .phantom import PhantomSpec, generate_phantom, random_smooth_ffd
from .priors import wall_prior_from_segmentation
from .registration import OptimizerConfig, icm_fit
from .surface import (
    extract_shell,
    gmm_baseline,
    otsu_scar_map,
    project_scar,
    surface_metrics,
    MetricsReport,
)
from .transforms import AffineTransform, TransformSet, TransformStack

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING_FILE = 3
EXIT_FORMAT = 4
EXIT_BAD_INPUT = 5
EXIT_CONFIG = 6
EXIT_INTERNAL = 7


class ConfigError(Exception):
    """A run configuration file or value is invalid."""


def _error_line(kind: str, message: str) -> str:
    one_line = " ".join(str(message).split())
    return f"scarseg:error:{kind}: {one_line}"


@dataclass
class RunConfig:
    """Inputs, model shape and schedule for one segment run."""

    images: list[str]
    prior: str
    out_dir: str
    seg: str | None = None
    labels: tuple[str, ...] = ("background", "wall")
    components: tuple[tuple[int, ...], ...] = ((2, 2), (2, 1))
    projection_mm: float = 3.0
    seed: int = 0
    register: bool = True
    scar_image: int = 0
    control_spacing: float = 10.0
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    def __post_init__(self):
        if not self.images:
            raise ConfigError("config lists no input images")
        for path in [*self.images, self.prior, *( [self.seg] if self.seg else [] )]:
            if not Path(path).exists():
                raise FileNotFoundError(f"input file not found: {path}")
        if self.projection_mm < 0:
            raise ConfigError("projection radius must be non-negative")

    def to_dict(self) -> dict:
        opt = self.optimizer
        return {
            "images": list(self.images),
            "prior": self.prior,
            "seg": self.seg,
            "out_dir": self.out_dir,
            "labels": list(self.labels),
            "components": [list(c) for c in self.components],
            "projection_mm": self.projection_mm,
            "seed": self.seed,
            "register": self.register,
            "scar_image": self.scar_image,
            "control_spacing": self.control_spacing,
            "optimizer": {
                "em_iters_per_block": opt.em_iters_per_block,
                "transform_steps_per_block": opt.transform_steps_per_block,
                "icm_blocks": opt.icm_blocks,
                "step_size_affine": opt.step_size_affine,
                "step_size_ffd": opt.step_size_ffd,
                "ll_rel_tol": opt.ll_rel_tol,
                "grad_norm_tol": opt.grad_norm_tol,
                "freeze": list(opt.freeze),
            },
        }


def _load_config_file(path: Path) -> dict:
    text = path.read_text()
    if path.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        try:
            return tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from exc


def _run_config_from_args(args) -> RunConfig:
    doc: dict = {}
    if args.config:
        doc = _load_config_file(Path(args.config))
    opt_doc = dict(doc.pop("optimizer", {}))

    def pick(flag, key, default):
        return flag if flag is not None else doc.get(key, default)

    images = args.image if args.image else doc.get("images", [])
    opt_updates = {
        "icm_blocks": args.blocks, "em_iters_per_block": args.em_iters,
        "transform_steps_per_block": args.steps, "step_size_affine": args.step_affine,
        "step_size_ffd": args.step_ffd, "ll_rel_tol": args.ll_tol,
    }
    for key, value in opt_updates.items():
        if value is not None:
            opt_doc[key] = value
    if args.freeze:
        opt_doc["freeze"] = args.freeze
    opt_doc["freeze"] = tuple(opt_doc.get("freeze", ()))
    try:
        optimizer = OptimizerConfig(**opt_doc)
    except TypeError as exc:
        raise ConfigError(f"unknown optimizer option: {exc}") from exc

    register = doc.get("register", True)
    if args.no_register:
        register = False
    components = doc.get("components", ((2, 2), (2, 1)))
    prior = pick(args.prior, "prior", None)
    out_dir = pick(args.out, "out_dir", None)
    if prior is None:
        raise ConfigError("no prior map specified (--prior or config key 'prior')")
    if out_dir is None:
        raise ConfigError("no output directory specified (--out or config key 'out_dir')")
    return RunConfig(
        images=list(images),
        prior=prior,
        out_dir=out_dir,
        seg=pick(args.seg, "seg", None),
        labels=tuple(doc.get("labels", ("background", "wall"))),
        components=tuple(tuple(c) for c in components),
        projection_mm=pick(args.projection_mm, "projection_mm", 3.0),
        seed=pick(args.seed, "seed", 0),
        register=register,
        scar_image=doc.get("scar_image", 0),
        control_spacing=pick(args.control_spacing, "control_spacing", 10.0),
        optimizer=optimizer,
    )


# ---------------------------------------------------------------------------
# Subcommands


def cmd_segment(config: RunConfig) -> int:
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images = [io.read_volume(p, kind="scalar") for p in config.images]
    prior = io.read_prior(config.prior)

    tissue = TissueConfig(config.labels, config.components)
    if tissue.n_images != len(images):
        raise ValueError(
            f"components declare {tissue.n_images} images, {len(images)} provided"
        )
    transforms = TransformSet.identity_for_domain(
        prior.grid, len(images), config.control_spacing
    )
    opt = config.optimizer
    if not config.register:
        freeze = tuple(f"image_{i}" for i in range(len(images))) + ("map",)
        opt = OptimizerConfig(
            opt.em_iters_per_block, opt.transform_steps_per_block, opt.icm_blocks,
            opt.step_size_affine, opt.step_size_ffd, opt.ll_rel_tol,
            opt.grad_norm_tol, freeze,
        )
    params = init_params(prior, images, tissue, transforms)
    result = icm_fit(images, prior, params, transforms, opt)
    label_map, scar_map = classify(result.posteriors, result.params,
                                   scar_image=config.scar_image)

    io.write_volume(label_map, out / "labels.nii")
    io.write_volume(scar_map, out / "scar.nii")
    io.write_json(result.params.to_dict(), out / "params.json")
    io.write_json(result.transforms.to_dict(), out / "transforms.json")
    io.write_trace(result.trace, out / "trace.jsonl")

    if config.seg:
        anatomy = io.read_volume(config.seg, kind="label")
    else:
        anatomy = label_map
    shell = project_scar(extract_shell(anatomy), scar_map, config.projection_mm)
    io.write_shell_text(shell, out / "shell.txt")

    io.write_json(
        {
            "ll": result.trace[-1]["ll"],
            "n_trace_entries": len(result.trace),
            "warnings": result.warnings,
            "scar_voxels": int(scar_map.labels.sum()),
            "config": config.to_dict(),
        },
        out / "run.json",
    )
    return EXIT_OK


def cmd_eval(pred_path, truth_path, seg_path, radius: float, out_dir) -> int:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pred = io.read_volume(pred_path, kind="label")
    truth = io.read_volume(truth_path, kind="label")
    anatomy = io.read_volume(seg_path, kind="label")
    shell = extract_shell(anatomy)
    pred_shell = project_scar(shell, pred, radius)
    truth_shell = project_scar(shell, truth, radius)
    metrics = surface_metrics(pred_shell, truth_shell)
    (out / "metrics.json").write_text(metrics.to_json() + "\n")
    (out / "metrics.csv").write_text(
        MetricsReport.CSV_HEADER + "\n" + metrics.to_csv_row() + "\n"
    )
    print(metrics.to_csv_row())
    return EXIT_OK


def _cmd_phantom(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dims = tuple(args.dims if len(args.dims) == 3 else args.dims * 3)
    grid = VolumeGrid(dims, tuple(args.spacing if len(args.spacing) == 3 else args.spacing * 3))

    true_transforms = None
    moved = [np.zeros(3) for _ in range(2)]
    if args.translate:
        moved[1] = np.asarray([float(v) for v in args.translate.split(",")])
        if moved[1].shape != (3,):
            raise ValueError("--translate expects dx,dy,dz")
    if args.translate or args.ffd_amplitude > 0:
        stacks = []
        for i in range(2):
            affine = AffineTransform(np.eye(3), moved[i], grid.center())
            if i == 1 and args.ffd_amplitude > 0:
                ffd = random_smooth_ffd(grid, args.ffd_amplitude, args.seed + 7)
            else:
                ffd = TransformStack.identity_for_domain(grid).ffd
            stacks.append(TransformStack(affine, ffd))
        true_transforms = stacks

    spec = PhantomSpec(
        grid,
        radii=tuple(args.radii),
        wall_thickness=args.wall_thickness,
        seed=args.seed,
        true_transforms=true_transforms,
    )
    result = generate_phantom(spec)
    for i, img in enumerate(result.images):
        io.write_volume(img, out / f"image_{i}.nii")
    io.write_volume(result.labels, out / "labels.nii")
    io.write_volume(result.scar, out / "scar.nii")
    pool = LabelVolume(grid, (result.labels.labels == 1).astype(np.int32))
    io.write_volume(pool, out / "pool.nii")
    io.write_prior(result.prior, out / "prior.nii")
    io.write_json(result.true_transforms.to_dict(), out / "transforms_true.json")
    return EXIT_OK


def _cmd_prior(args) -> int:
    seg = io.read_volume(args.seg, kind="label")
    prior = wall_prior_from_segmentation(seg, sigma=args.sigma, truncation=args.truncation)
    io.write_prior(prior, args.out)
    return EXIT_OK


def _cmd_baseline_otsu(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    image = io.read_volume(args.image, kind="scalar")
    prior = io.read_prior(args.prior)
    labels, scar, threshold = otsu_scar_map(image, prior, wall_threshold=args.wall_threshold)
    io.write_volume(labels, out / "labels.nii")
    io.write_volume(scar, out / "scar.nii")
    io.write_json({"threshold": threshold}, out / "threshold.json")
    return EXIT_OK


def _cmd_baseline_gmm(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    image = io.read_volume(args.image, kind="scalar")
    prior = io.read_prior(args.prior)
    labels, scar = gmm_baseline(image, prior, max_iters=args.max_iters)
    io.write_volume(labels, out / "labels.nii")
    io.write_volume(scar, out / "scar.nii")
    return EXIT_OK


def _cmd_project(args) -> int:
    scar = io.read_volume(args.scar, kind="label")
    anatomy = io.read_volume(args.seg, kind="label")
    shell = project_scar(extract_shell(anatomy), scar, args.radius)
    io.write_shell_text(shell, args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scarseg",
        description="Joint mixture segmentation of co-registered volumes "
                    "with surface-projected scar quantification.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic ground-truth dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--dims", type=int, nargs="+", default=[48])
    p.add_argument("--spacing", type=float, nargs="+", default=[1.0])
    p.add_argument("--radii", type=float, nargs=3, default=[14.0, 11.0, 9.0])
    p.add_argument("--wall-thickness", type=float, default=3.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--translate", help="dx,dy,dz mm applied to image 1")
    p.add_argument("--ffd-amplitude", type=float, default=0.0,
                   help="max control displacement (mm) applied to image 1")
    p.set_defaults(func=_cmd_phantom)

    p = sub.add_parser("prior", help="build a wall prior from a pool segmentation")
    p.add_argument("--seg", required=True)
    p.add_argument("--sigma", type=float, default=2.0)
    p.add_argument("--truncation", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_prior)

    p = sub.add_parser("segment", help="fit the joint model and write all artifacts")
    p.add_argument("--image", action="append", help="input volume (repeat per image)")
    p.add_argument("--prior")
    p.add_argument("--seg", help="anatomy segmentation for the projection shell")
    p.add_argument("--out")
    p.add_argument("--config", help="TOML or JSON run configuration")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--blocks", type=int, default=None)
    p.add_argument("--em-iters", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--step-affine", type=float, default=None)
    p.add_argument("--step-ffd", type=float, default=None)
    p.add_argument("--ll-tol", type=float, default=None)
    p.add_argument("--projection-mm", type=float, default=None)
    p.add_argument("--control-spacing", type=float, default=None)
    p.add_argument("--freeze", action="append", default=None,
                   help="freeze a transform group (image_0, image_1, map)")
    p.add_argument("--no-register", action="store_true")
    p.set_defaults(func=lambda args: cmd_segment(_run_config_from_args(args)))

    p = sub.add_parser("baseline-otsu", help="threshold baseline inside the prior wall")
    p.add_argument("--image", required=True)
    p.add_argument("--prior", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--wall-threshold", type=float, default=0.5)
    p.set_defaults(func=_cmd_baseline_otsu)

    p = sub.add_parser("baseline-gmm", help="single-image mixture baseline")
    p.add_argument("--image", required=True)
    p.add_argument("--prior", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-iters", type=int, default=100)
    p.set_defaults(func=_cmd_baseline_gmm)

    p = sub.add_parser("eval", help="surface metrics between two scar maps")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--seg", required=True)
    p.add_argument("--radius", type=float, default=3.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=lambda args: cmd_eval(args.pred, args.truth, args.seg,
                                              args.radius, args.out))

    p = sub.add_parser("project", help="project a scar map onto the anatomy shell")
    p.add_argument("--scar", required=True)
    p.add_argument("--seg", required=True)
    p.add_argument("--radius", type=float, default=3.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_project)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(_error_line("missing-file", exc), file=sys.stderr)
        return EXIT_MISSING_FILE
    except io.VolumeFormatError as exc:
        print(_error_line("format", exc), file=sys.stderr)
        return EXIT_FORMAT
    except ConfigError as exc:
        print(_error_line("config", exc), file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, TypeError) as exc:
        print(_error_line("bad-input", exc), file=sys.stderr)
        return EXIT_BAD_INPUT
    except Exception as exc:  # pragma: no cover - defensive
        print(_error_line("internal", exc), file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
