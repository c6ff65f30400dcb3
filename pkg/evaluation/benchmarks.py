"""
Ablations and stage-wise evaluation on synthetic fixtures.

Compares fitting variants over several fixture seeds and reports arm means,
standard deviations and a paired permutation test, in the same tabular form
for every experiment:

- hybrid loss (w_dr = 0.5) against ray tracing only (w_dr = 0), scored by
  camera-space vertex position error from an offset start;
- map regularisers (symmetry + consistency) on against off, scored by shading
  leakage into the recovered diffuse map;
- stage-wise recovery: coarse RMSE on a plain face, SSIM ordering and the
  fine-stage normal improvement on a face with detail, with every stage
  re-rendered on the target's own samples.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import pandas as pd

from core_engine.config import STAGES, FitConfig, StagePlanConfig
from core_engine.raytrace.tracer import RenderOutput, trace
from evaluation.fixtures import Fixture, diffuse_map, fixture_config, make_fixture, offset_init
from fitting.pipeline import FitResult, fit
from metrics.geometry import normal_angular_error, vertex_position_error
from metrics.image_quality import psnr, rmse, shading_leakage, ssim
from models.camera import rotation_matrix, to_camera
from models.morphable import eval_geometry
from models.scene import SceneParams, assemble_scene

logger = logging.getLogger(__name__)

REGULARIZER_WEIGHTS = ("w_s", "w_c_diffuse", "w_c_specular", "w_s_fine", "w_c_fine")
COARSE_RMSE_LIMIT = 0.02
NORMAL_REDUCTION = 0.2


@dataclass
class ComparisonResult:
    """One metric compared between a treatment arm and a baseline arm."""

    metric: str
    treatment_mean: float
    treatment_std: float
    baseline_mean: float
    baseline_std: float
    improvement_delta: float
    improvement_percentage: float
    p_value: Optional[float] = None


@dataclass
class AblationReport:
    """Per-seed scores plus the arm comparison."""

    name: str
    scores: pd.DataFrame
    comparison: ComparisonResult

    @property
    def direction_holds(self) -> bool:
        """True when the treatment's mean score is strictly below the baseline's."""
        return self.comparison.treatment_mean < self.comparison.baseline_mean

    def summary(self) -> pd.DataFrame:
        c = self.comparison
        return pd.DataFrame([{
            "Experiment": self.name,
            "Metric": c.metric,
            "Treatment_Mean": c.treatment_mean,
            "Treatment_Std": c.treatment_std,
            "Baseline_Mean": c.baseline_mean,
            "Baseline_Std": c.baseline_std,
            "Improvement_Delta": c.improvement_delta,
            "Improvement_Percentage": c.improvement_percentage,
            "p_value": c.p_value,
            "Direction_Holds": self.direction_holds,
            "Performance": "Better" if c.improvement_delta > 0 else "Worse" if c.improvement_delta < 0 else "Same",
        }])

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "direction_holds": self.direction_holds,
            "summary": self.summary().to_dict(orient="records")[0],
            "scores": self.scores.to_dict(orient="records"),
        }


def camera_space_vertices(fixture: Fixture, params: SceneParams) -> np.ndarray:
    vertices = eval_geometry(fixture.bundle, params.alpha, params.delta).vertices
    return np.asarray(to_camera(vertices, rotation_matrix(params.rot).value, params.trans).value)


class AblationBenchmarker:
    """
    Runs fitting variants on fixtures and compares them.

    All experiments use lower-is-better scores; a positive improvement delta
    means the treatment arm beat the baseline.
    """

    def __init__(self, config: Optional[FitConfig] = None, iterations: Optional[Dict[str, int]] = None,
                 progress: bool = False):
        """
        Args:
            config: fixture camera/render options and fit settings
            iterations: per-stage iteration counts overriding the config's plans
            progress: show per-stage progress bars
        """
        self.config = config or fixture_config()
        self.iterations = dict(iterations or {})
        self.progress = progress

    def plans(self, stages: Sequence[str], **overrides) -> List[StagePlanConfig]:
        plans = []
        for stage in stages:
            plan = self.config.plan(stage) or StagePlanConfig(stage=stage)
            update = dict(overrides)
            if stage in self.iterations:
                update["iterations"] = self.iterations[stage]
            plans.append(plan.model_copy(update=update))
        return plans

    def variant(self, stages: Sequence[str], weights: Optional[Dict[str, float]] = None, **plan_overrides) -> FitConfig:
        """The benchmark config restricted to `stages` with some weights replaced."""
        return self.config.model_copy(update={
            "weights": self.config.weights.model_copy(update=weights or {}),
            "stages": self.plans(stages, **plan_overrides),
            "quiet": True,
        })

    @staticmethod
    def compare_arms(metric: str, treatment: Sequence[float], baseline: Sequence[float],
                     p_value: Optional[float] = None) -> ComparisonResult:
        treatment = np.asarray(treatment, dtype=np.float64)
        baseline = np.asarray(baseline, dtype=np.float64)
        delta = float(baseline.mean() - treatment.mean())
        percentage = 100.0 * delta / baseline.mean() if baseline.mean() != 0 else 0.0
        return ComparisonResult(
            metric=metric,
            treatment_mean=float(treatment.mean()),
            treatment_std=float(treatment.std()),
            baseline_mean=float(baseline.mean()),
            baseline_std=float(baseline.std()),
            improvement_delta=delta,
            improvement_percentage=float(percentage),
            p_value=p_value,
        )

    @staticmethod
    def significance_test(treatment: Sequence[float], baseline: Sequence[float], n_permutations: int = 1000,
                          seed: int = 0) -> float:
        """
        Paired permutation test on the per-seed differences.

        Each permutation swaps the two arms' scores for a random subset of
        seeds; the p-value is the share of permutations whose mean difference
        is at least as large in magnitude as the observed one.
        """
        diffs = np.asarray(baseline, dtype=np.float64) - np.asarray(treatment, dtype=np.float64)
        if diffs.size == 0:
            raise ValueError("significance test needs at least one paired score")
        observed = abs(diffs.mean())
        rng = np.random.default_rng(seed)
        signs = np.where(rng.random((n_permutations, diffs.size)) > 0.5, -1.0, 1.0)
        permuted = np.abs((signs * diffs).mean(axis=1))
        return float(np.mean(permuted >= observed - 1e-15))

    def _fit(self, fixture: Fixture, config: FitConfig, init: SceneParams) -> FitResult:
        return fit(fixture.image, fixture.landmarks, fixture.bundle, config=config, init=init, progress=self.progress)

    def ablation_hybrid(self, seeds: Iterable[int] = range(5), w_dr: float = 0.5) -> AblationReport:
        """
        Coarse fits from an offset start with the hybrid loss against ray tracing only.

        Score: mean camera-space vertex position error (model units).
        """
        rows = []
        for seed in seeds:
            fixture = make_fixture("face", seed=seed, config=self.config, detail=False)
            init = offset_init(fixture, seed=seed)
            truth = camera_space_vertices(fixture, fixture.params)
            for arm, weight in (("hybrid", w_dr), ("raytrace", 0.0)):
                result = self._fit(fixture, self.variant(["coarse"], {"w_dr": weight}), init)
                error = vertex_position_error(camera_space_vertices(fixture, result.params), truth)
                rows.append({"seed": seed, "arm": arm, "w_dr": weight, "vertex_error": error.mean,
                             "vertex_error_std": error.std, "final_loss": result.stages["coarse"].final_loss})
                logger.info("hybrid ablation seed %d, %s: vertex error %.4f", seed, arm, error.mean)
        return self._report("hybrid_vs_raytrace", "vertex_error", pd.DataFrame(rows), "hybrid", "raytrace")

    def ablation_regularizers(self, seeds: Iterable[int] = (0,)) -> AblationReport:
        """
        Medium + fine fits on a target with shading baked into the diffuse
        map, with and without the symmetry and consistency terms.

        Coarse parameters start at the truth so only the maps are estimated.
        Score: shading leakage of the final diffuse map.
        """
        rows = []
        for seed in seeds:
            fixture = make_fixture("face", seed=seed, config=self.config, baked=True)
            truth = fixture.params
            init = SceneParams.initial(fixture.bundle, trans=truth.trans, sh=truth.sh, roughness=truth.roughness)
            init = init.with_blocks(alpha=truth.alpha, delta=truth.delta, beta=truth.beta, rot=truth.rot)
            context = fixture.context()
            valid = context.atlas.coverage
            disabled = {name: 0.0 for name in REGULARIZER_WEIGHTS}
            for arm, weights in (("regularized", {}), ("unregularized", disabled)):
                result = self._fit(fixture, self.variant(["medium", "fine"], weights, co_refine=False), init)
                fitted = diffuse_map(context, result.params)
                leakage = shading_leakage(fitted, fixture.true_diffuse, fixture.shading, valid)
                rows.append({"seed": seed, "arm": arm, "leakage": leakage})
                logger.info("regulariser ablation seed %d, %s: leakage %.4f", seed, arm, leakage)
        return self._report("regularizer_separation", "leakage", pd.DataFrame(rows), "regularized", "unregularized")

    def stagewise(self, seed: int = 7) -> "StagewiseReport":
        """
        Recovery from an offset mean-face start.

        A coarse-only fit on a face without detail must reproduce its target;
        a full fit on a face with detail must improve SSIM stage by stage and
        cut the normal error of the coarse stage.
        """
        plain = make_fixture("face", seed=seed, config=self.config, detail=False)
        coarse = self._fit(plain, self.variant(["coarse"]), offset_init(plain, seed=seed))
        coarse_table = stage_evaluation(coarse, plain)

        detailed = make_fixture("face", seed=seed, config=self.config)
        result = self._fit(detailed, self.variant(STAGES), offset_init(detailed, seed=seed))
        report = StagewiseReport(coarse=coarse_table, stages=stage_evaluation(result, detailed))
        logger.info("stagewise seed %d: coarse rmse %.4f, checks %s", seed, report.coarse_rmse, report.checks)
        return report

    def _report(self, name: str, metric: str, scores: pd.DataFrame, treatment: str, baseline: str) -> AblationReport:
        treated = scores.loc[scores["arm"] == treatment].sort_values("seed")[metric].to_numpy()
        base = scores.loc[scores["arm"] == baseline].sort_values("seed")[metric].to_numpy()
        p_value = self.significance_test(treated, base) if len(treated) > 1 else None
        report = AblationReport(name=name, scores=scores, comparison=self.compare_arms(metric, treated, base, p_value))
        logger.info("%s: %s %.4f +- %.4f vs %.4f +- %.4f", name, metric, report.comparison.treatment_mean,
                    report.comparison.treatment_std, report.comparison.baseline_mean,
                    report.comparison.baseline_std)
        return report


def stagewise_ssim(result: FitResult, image: np.ndarray, mask: Optional[np.ndarray] = None) -> pd.DataFrame:
    """SSIM, RMSE and PSNR of each stage's traced render against the target, in stage order."""
    rows = []
    for stage, stage_result in result.stages.items():
        render = np.clip(stage_result.image, 0.0, 1.0)
        target = np.clip(image, 0.0, 1.0)
        rows.append({
            "stage": stage,
            "ssim": ssim(render, target),
            "rmse": rmse(render, target, mask),
            "psnr": psnr(render, target, mask),
        })
    return pd.DataFrame(rows)


def ssim_ordering_holds(table: pd.DataFrame, tolerance: float = 0.0) -> bool:
    """True when SSIM does not decrease from one stage to the next."""
    values = table["ssim"].to_numpy()
    return bool(np.all(np.diff(values) >= -tolerance))


def rerender_stages(result: FitResult, fixture: Fixture, spp: Optional[int] = None) -> Dict[str, RenderOutput]:
    """
    Each stage's parameters traced with the target's own sample stream.

    The target's seed and spp are reused, so the comparison with the target
    carries no independent Monte-Carlo noise: a stage that recovered the
    rendered parameters reproduces the target bit for bit.
    """
    context = fixture.context()
    spp = fixture.render.spp if spp is None else spp
    renders = {}
    for stage, stage_result in result.stages.items():
        scene = assemble_scene(context, stage_result.params.blocks(), stage)
        renders[stage] = trace(scene, fixture.config.render, spp=spp, seed=fixture.seed)
    return renders


def stage_evaluation(result: FitResult, fixture: Fixture, spp: Optional[int] = None) -> pd.DataFrame:
    """
    Image and normal errors of every stage against a fixture, in stage order.

    RMSE, PSNR and the normal angular error are taken over pixels covered by
    both the stage render and the target; SSIM over the whole frame.
    """
    rows = []
    target = np.clip(fixture.image, 0.0, 1.0)
    for stage, render in rerender_stages(result, fixture, spp).items():
        image = np.clip(render.image, 0.0, 1.0)
        joint = render.mask & fixture.mask
        normals = normal_angular_error(render.normals, fixture.normals, joint)
        rows.append({
            "stage": stage,
            "ssim": ssim(image, target),
            "rmse": rmse(image, target, joint),
            "psnr": psnr(image, target, joint),
            "normal_error": normals.mean,
            "normal_error_std": normals.std,
            "covered": int(joint.sum()),
        })
    return pd.DataFrame(rows)


@dataclass
class StagewiseReport:
    """
    Coarse recovery on a plain face plus the stage-wise evaluation of a full
    fit on a face with albedo detail and detail normals.
    """

    coarse: pd.DataFrame
    stages: pd.DataFrame
    coarse_rmse_limit: float = COARSE_RMSE_LIMIT
    normal_reduction: float = NORMAL_REDUCTION

    @property
    def coarse_rmse(self) -> float:
        return float(self.coarse.set_index("stage").loc["coarse", "rmse"])

    def normal_errors(self) -> Dict[str, float]:
        return dict(zip(self.stages["stage"], self.stages["normal_error"]))

    @property
    def checks(self) -> Dict[str, bool]:
        errors = self.normal_errors()
        return {
            "coarse_rmse": self.coarse_rmse < self.coarse_rmse_limit,
            "normal_reduction": bool(errors["fine"] <= (1.0 - self.normal_reduction) * errors["coarse"]),
            "ssim_ordering": ssim_ordering_holds(self.stages),
        }

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def to_dict(self) -> dict:
        return {
            "experiment": "stagewise",
            "passed": self.passed,
            "checks": self.checks,
            "coarse_rmse": self.coarse_rmse,
            "coarse": self.coarse.to_dict(orient="records"),
            "stages": self.stages.to_dict(orient="records"),
        }
