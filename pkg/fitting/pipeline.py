"""
Coarse -> medium -> fine fitting of one image.

Each stage optimises its trainable blocks with Adam while every other block
stays frozen. The Monte-Carlo seed changes every iteration (but is shared by
the loss and its gradient) and the consistency weights relax once per round.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm

from alignment.landmark_alignment import LandmarkAligner
from core_engine.autodiff.tape import backward, record
from core_engine.config import STAGES, FitConfig, StagePlanConfig, config_hash
from core_engine.errors import FitDivergenceError, NonFiniteError
from core_engine.raster.vertex_renderer import render_vertex_image
from core_engine.raytrace.tracer import RenderOutput, trace
from fitting.adam import AdamState, adam_step
from fitting.schedule import round_of, schedule_weights
from losses.objectives import StageLoss, split_blocks, stage_loss
from models.morphable import ModelBundle
from models.scene import SceneContext, SceneParams, assemble_scene, project_normal_map

logger = logging.getLogger(__name__)

STAGE_SEED_STRIDE = 100003
WINDOW = 10
# relative rise of the windowed loss still read as Monte-Carlo jitter
RISE_TOLERANCE = 0.01


@dataclass
class StageResult:
    """Parameters and renders at the end of one stage."""

    stage: str
    params: SceneParams
    render: RenderOutput
    vertex_image: np.ndarray
    iterations: int
    final_loss: float
    converged: bool = True

    @property
    def image(self) -> np.ndarray:
        return self.render.image


@dataclass
class FitResult:
    params: SceneParams
    initial: SceneParams
    stages: Dict[str, StageResult] = field(default_factory=dict)
    log: pd.DataFrame = field(default_factory=pd.DataFrame)
    config_hash: str = ""

    @property
    def renders(self) -> Dict[str, np.ndarray]:
        return {stage: result.image for stage, result in self.stages.items()}

    @property
    def converged(self) -> bool:
        return all(result.converged for result in self.stages.values())

    @property
    def final_render(self) -> Optional[np.ndarray]:
        if not self.stages:
            return None
        return list(self.stages.values())[-1].image


def iteration_seed(base_seed: int, stage: str, iteration: int) -> int:
    return base_seed + STAGE_SEED_STRIDE * STAGES.index(stage) + iteration


def loss_rose(totals: Sequence[float], window: int = WINDOW, tolerance: float = RISE_TOLERANCE) -> bool:
    """
    True when the mean loss of the last `window` iterations exceeds that of
    the window before it by more than `tolerance` (relative).

    Runs shorter than two windows are never flagged.
    """
    totals = np.asarray(totals, dtype=np.float64)
    if len(totals) < 2 * window:
        return False
    late = totals[-window:].mean()
    early = totals[-2 * window:-window].mean()
    return bool(late > early + tolerance * abs(early))


def stage_render(context: SceneContext, params: SceneParams, stage: str, config: FitConfig) -> StageResult:
    scene = assemble_scene(context, params.blocks(), stage)
    output = trace(scene, config.render)
    vertex_image, _ = render_vertex_image(scene)
    return StageResult(stage=stage, params=params, render=output, vertex_image=vertex_image, iterations=0,
                       final_loss=float("nan"))


class StageFitter:
    """Runs one stage plan from given starting parameters."""

    def __init__(self, context: SceneContext, config: FitConfig, image: np.ndarray,
                 landmarks: Optional[np.ndarray]):
        self.context = context
        self.config = config
        self.image = np.asarray(image, dtype=np.float64)
        self.landmarks = None if landmarks is None else np.asarray(landmarks, dtype=np.float64)

    def step_loss(self, plan: StagePlanConfig, params: SceneParams, iteration: int):
        """Loss terms and gradients of the trainable blocks at one iteration."""
        weights = schedule_weights(self.config.weights, round_of(iteration, self.config.weights))
        seed = iteration_seed(self.config.render.seed, plan.stage, iteration)
        train, frozen = split_blocks(params.blocks(), plan.trainable)
        captured: Dict[str, StageLoss] = {}

        def objective(variables, tape):
            blocks = dict(frozen)
            blocks.update(variables)
            captured["loss"] = stage_loss(plan.stage, self.context, blocks, self.image, self.landmarks, weights,
                                          self.config.render, seed=seed, tape=tape,
                                          fine_specular=plan.fine_specular_increment)
            return captured["loss"].total

        try:
            loss, tape = record(objective, train, seed=seed)
            report = backward(loss, tape)
        except NonFiniteError as exc:
            raise FitDivergenceError(plan.stage, iteration) from exc
        if not np.isfinite(float(loss.value)):
            raise FitDivergenceError(plan.stage, iteration)
        for grad in report.grads.values():
            if not np.all(np.isfinite(grad)):
                raise FitDivergenceError(plan.stage, iteration)
        return captured["loss"], train, report.grads, weights

    def run(self, plan: StagePlanConfig, params: SceneParams, progress: bool = True):
        """
        Optimise the plan's trainable blocks.

        Returns:
            (parameters after the stage, log rows)
        """
        rows: List[dict] = []
        if plan.iterations == 0:
            return params, rows

        state = AdamState.create({name: params.blocks()[name] for name in plan.trainable}, self.config.adam)
        logger.info("stage %s: %d iterations over %s", plan.stage, plan.iterations, ", ".join(plan.trainable))
        current_round = 0
        bar = tqdm(range(plan.iterations), desc=plan.stage, disable=not progress or self.config.quiet, leave=False)
        for iteration in bar:
            loss, train, grads, weights = self.step_loss(plan, params, iteration)
            round_index = round_of(iteration, self.config.weights)
            if round_index != current_round:
                current_round = round_index
                logger.info("stage %s round %d: w_c_diffuse=%.4g w_c_fine=%.4g", plan.stage, round_index,
                            weights.w_c_diffuse, weights.w_c_fine)
            rates = {name: plan.learning_rate(name) * plan.lr_decay ** round_index for name in train}
            updated = adam_step(state, train, grads, rates)
            if "fine_normal_inc" in updated:
                updated["fine_normal_inc"] = project_normal_map(updated["fine_normal_inc"])
            params = params.with_blocks(**updated)

            values = loss.values()
            rows.append({"stage": plan.stage, "iteration": iteration, "round": round_index,
                         "seed": iteration_seed(self.config.render.seed, plan.stage, iteration), **values})
            bar.set_postfix(loss=f"{values['total']:.4g}")
            logger.debug("%s it %d: %s", plan.stage, iteration, values)

        return params, rows


def fit(image: np.ndarray, landmarks: Optional[np.ndarray], bundle: ModelBundle,
        config: Optional[FitConfig] = None, init: Optional[SceneParams] = None,
        progress: bool = True) -> FitResult:
    """
    Fit scene parameters to one image, stage by stage.

    Args:
        image: (H, W, 3) linear target
        landmarks: (68, 2) pixel positions (needed for initialisation and when w_lm > 0)
        bundle: statistical model
        config: stage plans, weights, render and camera options
        init: starting parameters; landmark alignment when omitted
        progress: show tqdm bars

    Returns:
        FitResult with final parameters, per-stage renders and the fit log
    """
    config = config or FitConfig()
    if init is None:
        aligner = LandmarkAligner(config.camera)
        init = aligner.initialize(bundle, image, landmarks, roughness=config.render.roughness)
    context = SceneContext.build(bundle, config.camera, config.render.roughness)
    fitter = StageFitter(context, config, image, landmarks)

    params = init.copy()
    stages: Dict[str, StageResult] = {}
    rows: List[dict] = []
    for plan in config.stages:
        params, stage_rows = fitter.run(plan, params, progress=progress)
        rows.extend(stage_rows)
        result = stage_render(context, params, plan.stage, config)
        result.iterations = plan.iterations
        result.final_loss = stage_rows[-1]["total"] if stage_rows else float("nan")
        result.converged = not loss_rose([row["total"] for row in stage_rows])
        if not result.converged:
            logger.warning("stage %s: windowed loss rose over the last %d iterations", plan.stage, WINDOW)
        stages[plan.stage] = result
        logger.info("stage %s done: loss %.5g", plan.stage, result.final_loss)

    log = pd.DataFrame(rows)
    return FitResult(params=params, initial=init, stages=stages, log=log, config_hash=config_hash(config))
