"""
Command-line entry point of the facial inverse-rendering toolkit.

Subcommands:
    make-fixture  synthesize a bundle, ground-truth scene and rendered target
    render        ray trace (and vertex render) a scene from saved parameters
    fit           coarse -> medium -> fine fit of one image
    gradcheck     finite-difference check of every stage loss
    ablation      hybrid-loss / regulariser / stage-wise experiments on fixtures
    metrics       position, angular and image metrics between saved results

Every command writes its outputs under --out together with manifest.json
(command, config hash, seed and SHA-256 of each artifact).
"""

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
from pydantic import ValidationError

from alignment.landmark_alignment import LandmarkAligner
from core_engine.autodiff.gradcheck import check_gradients
from core_engine.config import (
    PROFILE_PATHS,
    STAGES,
    FitConfig,
    RenderConfig,
    StagePlanConfig,
    config_hash,
    load_config,
    load_profile,
)
from core_engine.errors import ConfigError, InverseRenderingError
from core_engine.lighting.envmap import bake_envmap
from core_engine.raster.vertex_renderer import project_to_uv, render_vertex_image
from core_engine.raytrace.tracer import trace
from evaluation.benchmarks import AblationBenchmarker, stagewise_ssim
from evaluation.fixtures import TARGET_SPP, make_fixture
from fitting.pipeline import fit
from losses.objectives import split_blocks, stage_objective
from metrics.geometry import normal_angular_error, vertex_position_error
from metrics.image_quality import psnr, rmse, ssim
from models.morphable import eval_geometry, load_bundle
from models.scene import SceneContext, SceneParams, assemble_scene
from preprocessing.image_io import (
    read_image,
    read_landmarks,
    read_mask,
    read_obj,
    read_pfm,
    write_mask,
    write_obj,
    write_pfm,
    write_png,
)

logger = logging.getLogger("main")

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_ERROR = 2
EXIT_CHECK_FAILED = 3


class RunDirectory:
    """Output directory of one command; records artifacts for the manifest."""

    def __init__(self, out: Path, command: str, config: FitConfig):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.config = config
        self.artifacts: List[Path] = []

    def path(self, name: str) -> Path:
        return self.out / name

    def add(self, path: Path) -> Path:
        path = Path(path)
        if path.is_dir():
            self.artifacts.extend(sorted(p for p in path.rglob("*") if p.is_file()))
        else:
            self.artifacts.append(path)
        return path

    def write_json(self, name: str, data) -> Path:
        path = self.path(name)
        path.write_text(json.dumps(data, indent=2, default=float), encoding="utf-8")
        return self.add(path)

    def write_frame(self, name: str, frame: pd.DataFrame) -> Path:
        path = self.path(name)
        frame.to_csv(path, index=False)
        return self.add(path)

    def finish(self) -> Path:
        entries = []
        for path in sorted(set(self.artifacts)):
            data = path.read_bytes()
            entries.append({"path": path.relative_to(self.out).as_posix(), "bytes": len(data),
                            "sha256": hashlib.sha256(data).hexdigest()})
        manifest = {
            "command": self.command,
            "config_hash": config_hash(self.config),
            "seed": self.config.render.seed,
            "spp": self.config.render.spp,
            "deterministic": self.config.render.deterministic,
            "artifacts": entries,
        }
        path = self.path("manifest.json")
        path.write_text(json.dumps(manifest, indent=2), encoding="utf-8")
        logger.info("%s: %d artifacts written to %s", self.command, len(entries), self.out)
        return path


def resolve_config(args: argparse.Namespace) -> FitConfig:
    """Load --config (or the --profile) and apply the --seed / --spp / --deterministic overrides."""
    config = load_config(args.config) if args.config is not None else load_profile(args.profile)
    render = config.render.model_dump()
    if args.seed is not None:
        render["seed"] = args.seed
    if args.spp is not None:
        render["spp"] = args.spp
    if args.deterministic:
        render["deterministic"] = True
    try:
        return config.model_copy(update={"render": RenderConfig.model_validate(render)})
    except ValidationError as exc:
        raise ConfigError(f"invalid render override: {exc}") from exc


def _load_params(args: argparse.Namespace, config: FitConfig, bundle, image: np.ndarray,
                 landmarks: Optional[np.ndarray]) -> SceneParams:
    if getattr(args, "params", None):
        params = SceneParams.load(args.params)
        params.validate(bundle)
        return params
    if landmarks is None:
        raise ConfigError("either --params or --landmarks is required to set up the scene")
    return LandmarkAligner(config.camera).initialize(bundle, image, landmarks, roughness=config.render.roughness)


def _scene_maps(context: SceneContext, params: SceneParams) -> Dict[str, np.ndarray]:
    scene = assemble_scene(context, params.blocks(), "fine")
    return {
        "diffuse": np.asarray(scene.diffuse_map.value),
        "specular": np.asarray(scene.specular_map.value),
        "normal": np.asarray(params.fine_normal_inc),
    }


def cmd_make_fixture(args: argparse.Namespace, config: FitConfig, run: RunDirectory) -> int:
    fixture = make_fixture(args.kind, seed=config.render.seed, config=config, detail=not args.no_detail,
                           baked=args.baked, target_spp=args.spp or TARGET_SPP)
    for path in fixture.save(run.out).values():
        run.add(path)
    return EXIT_OK


def cmd_render(args: argparse.Namespace, config: FitConfig, run: RunDirectory) -> int:
    bundle = load_bundle(args.bundle)
    params = SceneParams.load(args.params)
    params.validate(bundle)
    context = SceneContext.build(bundle, config.camera, params.roughness)
    scene = assemble_scene(context, params.blocks(), args.stage)
    output = trace(scene, config.render)
    vertex_image, vertex_mask = render_vertex_image(scene)
    run.add(write_pfm(run.path("render.pfm"), output.image))
    run.add(write_png(run.path("render.png"), output.image))
    run.add(write_mask(run.path("mask.png"), output.mask))
    run.add(write_pfm(run.path("normals.pfm"), output.normals))
    run.add(write_pfm(run.path("standard_error.pfm"), output.standard_error))
    run.add(write_png(run.path("vertex_render.png"), vertex_image))
    run.add(write_mask(run.path("vertex_mask.png"), vertex_mask))
    logger.info("rendered stage %s: %d covered pixels at %d spp", args.stage, output.covered, output.spp)
    return EXIT_OK


def cmd_fit(args: argparse.Namespace, config: FitConfig, run: RunDirectory) -> int:
    bundle = load_bundle(args.bundle)
    image = read_image(args.image)
    landmarks = read_landmarks(args.landmarks) if args.landmarks else None
    init = SceneParams.load(args.init) if args.init else None
    if init is None and landmarks is None:
        raise ConfigError("fit needs --landmarks for initialisation unless --init is given")
    result = fit(image, landmarks, bundle, config=config, init=init, progress=not config.quiet)

    run.add(result.params.save(run.path("params.json")))
    context = SceneContext.build(bundle, config.camera, result.params.roughness)
    maps = _scene_maps(context, result.params)
    projection = project_to_uv(image, assemble_scene(context, result.params.blocks(), "coarse"))
    run.add(write_pfm(run.path("uv_projection.pfm"), projection.texture))
    run.add(write_mask(run.path("uv_projection_mask.png"), projection.valid))
    for name, data in maps.items():
        run.add(write_pfm(run.path(f"{name}.pfm"), data))
    run.add(write_png(run.path("diffuse.png"), maps["diffuse"]))
    envmap = bake_envmap(result.params.light)
    run.add(write_pfm(run.path("envmap.pfm"), envmap.radiance))
    for stage, stage_result in result.stages.items():
        run.add(write_pfm(run.path(f"render_{stage}.pfm"), stage_result.image))
        run.add(write_png(run.path(f"render_{stage}.png"), stage_result.image))
        run.add(write_png(run.path(f"vertex_render_{stage}.png"), stage_result.vertex_image))
    run.write_frame("fit_log.csv", result.log)
    vertices = eval_geometry(bundle, result.params.alpha, result.params.delta).vertices
    mesh_path = write_obj(run.path("mesh.obj"), vertices, bundle.triangles, bundle.uv, texture="diffuse.png")
    run.add(mesh_path)
    run.add(mesh_path.with_suffix(".mtl"))

    summary = {"config_hash": result.config_hash,
               "converged": result.converged,
               "uv_projection_valid": float(projection.valid.mean()),
               "light_energy": envmap.energy().tolist(),
               "stages": {stage: {"iterations": r.iterations, "final_loss": r.final_loss, "converged": r.converged}
                          for stage, r in result.stages.items()}}
    if result.stages:
        table = stagewise_ssim(result, image)
        run.write_frame("stage_metrics.csv", table)
        summary["stage_metrics"] = table.to_dict(orient="records")
    run.write_json("summary.json", summary)
    if not result.converged:
        stalled = [stage for stage, r in result.stages.items() if not r.converged]
        logger.error("fit did not converge in stage(s) %s", ", ".join(stalled))
        return EXIT_CHECK_FAILED
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace, config: FitConfig, run: RunDirectory) -> int:
    bundle = load_bundle(args.bundle)
    image = read_image(args.image)
    landmarks = read_landmarks(args.landmarks) if args.landmarks else None
    params = _load_params(args, config, bundle, image, landmarks)
    context = SceneContext.build(bundle, config.camera, params.roughness)
    stages = STAGES if args.stage == "all" else (args.stage,)

    passed = True
    summary = {}
    for stage in stages:
        plan = config.plan(stage) or StagePlanConfig(stage=stage)
        train, frozen = split_blocks(params.blocks(), plan.trainable)
        objective = stage_objective(stage, context, frozen, image, landmarks, config.weights, config.render,
                                    seed=config.render.seed, fine_specular=plan.fine_specular_increment)
        report = check_gradients(objective, train, step=args.step, seed=config.render.seed,
                                 threshold=args.threshold, n_coords=args.coords, rng_seed=config.render.seed)
        path = run.path(f"gradcheck_{stage}.json")
        path.write_text(report.to_json(), encoding="utf-8")
        run.add(path)
        verdicts = report.table["verdict"].value_counts().to_dict()
        summary[stage] = {"passed": report.passed, "max_rel_error": report.max_rel_error, "verdicts": verdicts}
        logger.info("gradcheck %s: %s (max relative error %.3g, %s)", stage,
                    "passed" if report.passed else "FAILED", report.max_rel_error, verdicts)
        passed &= report.passed
    run.write_json("gradcheck.json", {"passed": passed, "stages": summary})
    return EXIT_OK if passed else EXIT_CHECK_FAILED


def cmd_ablation(args: argparse.Namespace, config: FitConfig, run: RunDirectory) -> int:
    iterations = {stage: args.iterations for stage in STAGES} if args.iterations is not None else None
    benchmarker = AblationBenchmarker(config, iterations=iterations, progress=not config.quiet)
    seeds = list(range(args.seeds))

    if args.experiment == "stagewise":
        stagewise = benchmarker.stagewise(seed=config.render.seed)
        run.write_frame("stage_coarse_metrics.csv", stagewise.coarse)
        run.write_frame("stage_metrics.csv", stagewise.stages)
        run.write_json("ablation.json", stagewise.to_dict())
        print(stagewise.stages.to_string(index=False))
        return EXIT_OK if stagewise.passed else EXIT_CHECK_FAILED

    if args.experiment == "hybrid":
        report = benchmarker.ablation_hybrid(seeds)
    else:
        report = benchmarker.ablation_regularizers(seeds)
    run.write_frame("ablation_scores.csv", report.scores)
    run.write_frame("ablation_summary.csv", report.summary())
    run.write_json("ablation.json", report.to_dict())
    print(report.summary().T.to_string(header=False))
    return EXIT_OK


def cmd_metrics(args: argparse.Namespace, config: FitConfig, run: RunDirectory) -> int:
    reports: Dict[str, dict] = {}
    if args.pred_mesh and args.gt_mesh:
        pred, _, _ = read_obj(args.pred_mesh)
        gt, _, _ = read_obj(args.gt_mesh)
        reports["vertex_position_error"] = vertex_position_error(pred, gt).to_dict()
    if args.pred_normals and args.gt_normals:
        mask = read_mask(args.mask) if args.mask else None
        reports["normal_angular_error"] = normal_angular_error(read_pfm(args.pred_normals),
                                                               read_pfm(args.gt_normals), mask).to_dict()
    if args.pred_image and args.gt_image:
        pred_image = np.clip(read_image(args.pred_image), 0.0, 1.0)
        gt_image = np.clip(read_image(args.gt_image), 0.0, 1.0)
        reports["image"] = {"ssim": ssim(pred_image, gt_image), "rmse": rmse(pred_image, gt_image),
                            "psnr": psnr(pred_image, gt_image)}
    if not reports:
        raise ConfigError("metrics needs at least one pair: --pred-mesh/--gt-mesh, "
                          "--pred-normals/--gt-normals or --pred-image/--gt-image")
    run.write_json("metrics.json", reports)
    rows = []
    for name, report in reports.items():
        rows.append({"metric": name, **{k: v for k, v in report.items() if not isinstance(v, dict)}})
    table = pd.DataFrame(rows)
    run.write_frame("metrics.csv", table)
    print(table.to_string(index=False))
    return EXIT_OK


COMMANDS = {
    "make-fixture": cmd_make_fixture,
    "render": cmd_render,
    "fit": cmd_fit,
    "gradcheck": cmd_gradcheck,
    "ablation": cmd_ablation,
    "metrics": cmd_metrics,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="JSON or YAML run config (overrides --profile)")
    common.add_argument("--profile", choices=list(PROFILE_PATHS), default="default",
                        help="Shipped config: literal loss weights, or per-pixel averaged for single images.")
    common.add_argument("--out", type=Path, default=Path("runs/latest"), help="Output run directory.")
    common.add_argument("--seed", type=int, default=None, help="Override render.seed.")
    common.add_argument("--spp", type=int, default=None, help="Override render.spp.")
    common.add_argument("--deterministic", action="store_true", help="Force deterministic traversal.")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = argparse.ArgumentParser(description="Differentiable facial inverse rendering toolkit",
                                      formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-fixture", parents=[common], help="Synthesize a fixture with ground truth.")
    p.add_argument("--kind", choices=["face", "sphere", "blocker"], default="face")
    p.add_argument("--baked", action="store_true", help="Bake asymmetric shading into the diffuse map.")
    p.add_argument("--no-detail", action="store_true", help="Omit albedo detail and detail normals.")

    p = sub.add_parser("render", parents=[common], help="Render a scene from saved parameters.")
    p.add_argument("--bundle", type=Path, required=True)
    p.add_argument("--params", type=Path, required=True)
    p.add_argument("--stage", choices=list(STAGES), default="fine")

    p = sub.add_parser("fit", parents=[common], help="Fit one image.")
    p.add_argument("--bundle", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--landmarks", type=Path, default=None)
    p.add_argument("--init", type=Path, default=None, help="Start from saved parameters instead of alignment.")

    p = sub.add_parser("gradcheck", parents=[common], help="Finite-difference check of the stage losses.")
    p.add_argument("--bundle", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--landmarks", type=Path, default=None)
    p.add_argument("--params", type=Path, default=None)
    p.add_argument("--stage", choices=list(STAGES) + ["all"], default="all")
    p.add_argument("--coords", type=int, default=64)
    p.add_argument("--step", type=float, default=1e-4)
    p.add_argument("--threshold", type=float, default=1e-4)

    p = sub.add_parser("ablation", parents=[common], help="Run an ablation on synthetic fixtures.")
    p.add_argument("--experiment", choices=["hybrid", "regularizers", "stagewise"], default="hybrid")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--iterations", type=int, default=None, help="Iterations per stage (config plans if omitted).")
    p.set_defaults(profile="per_image")

    p = sub.add_parser("metrics", parents=[common], help="Compare saved predictions with ground truth.")
    p.add_argument("--pred-mesh", type=Path)
    p.add_argument("--gt-mesh", type=Path)
    p.add_argument("--pred-normals", type=Path)
    p.add_argument("--gt-normals", type=Path)
    p.add_argument("--mask", type=Path)
    p.add_argument("--pred-image", type=Path)
    p.add_argument("--gt-image", type=Path)
    return parser


def configure_logging(level: str) -> None:
    logging.basicConfig(level=getattr(logging, level), stream=sys.stderr, force=True,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        config = resolve_config(args)
        run = RunDirectory(args.out, args.command, config)
        code = COMMANDS[args.command](args, config, run)
        run.finish()
        return code
    except InverseRenderingError as exc:
        print(exc.qualified(), file=sys.stderr)
        return EXIT_ERROR
    except Exception:
        logger.exception("unexpected failure in '%s'", args.command)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
