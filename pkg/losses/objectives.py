"""
Stage objectives.

    data    E_d   = E_ph^S + w_dr E_ph^R + w_lm E_land
    coarse        = E_d + w_p E_p(alpha, beta) + w_b E_b(delta)
    medium        = E_d + w_s E_s(D^, S^) + w_c E_c(D^, D) + w_c_spec E_c(S^, S) + w_m E_m(D^, S^) + w_b E_b(D^, S^)
    fine          = E_d + w_s^f E_s(D-) + w_c^f E_c(D-, D^) + w_m^f E_m(D-, N-) + w_b^f E_b(D-)

With the optional fine specular increment, S- = S^ + inc_s is regularised
alongside D- (symmetry, consistency against S^, smoothness, soft box).
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Optional

import numpy as np

from core_engine.autodiff.tape import DiffValue, Tape, lift
from core_engine.config import LossWeights, RenderConfig
from core_engine.errors import LossError
from core_engine.raster.vertex_renderer import landmark_loss, vertex_photo_loss
from core_engine.raytrace.tracer import RenderOutput, ray_photo_loss, trace
from losses.regularizers import consistency_loss, prior_loss, smoothness_loss, softbox_loss, symmetry_loss
from models.scene import SceneContext, SceneTerms, assemble_scene

logger = logging.getLogger(__name__)


@dataclass
class StageLoss:
    """A stage objective with its weighted parts (weights already applied)."""

    total: DiffValue
    terms: Dict[str, DiffValue] = field(default_factory=dict)
    render: Optional[RenderOutput] = None
    visible: Optional[np.ndarray] = None

    def values(self) -> Dict[str, float]:
        out = {name: float(term.value) for name, term in self.terms.items()}
        out["total"] = float(self.total.value)
        return out


def _accumulate(terms: Dict[str, DiffValue]) -> DiffValue:
    total = lift(0.0)
    for term in terms.values():
        total = total + term
    return total


def data_terms(scene: SceneTerms, image: np.ndarray, landmarks: Optional[np.ndarray], weights: LossWeights,
               render: RenderConfig, seed: Optional[int] = None,
               tape: Optional[Tape] = None) -> tuple:
    """
    The hybrid data term's parts: ray-traced L1, vertex L1 and landmarks.

    Raises:
        LossError: landmarks are missing while w_lm > 0
    """
    if weights.w_lm > 0 and landmarks is None:
        raise LossError("landmarks are required when w_lm > 0")
    reduction = weights.photometric_reduction
    terms: Dict[str, DiffValue] = {}
    output = trace(scene, render, seed=seed, tape=tape)
    terms["photo_ray"] = ray_photo_loss(output, image, reduction)
    visible = None
    if weights.w_dr > 0:
        vertex_term, visible = vertex_photo_loss(scene, image, reduction, tape=tape)
        terms["photo_vertex"] = weights.w_dr * vertex_term
    if weights.w_lm > 0:
        terms["landmarks"] = weights.w_lm * landmark_loss(scene, landmarks)
    return terms, output, visible


def regularizer_terms(scene: SceneTerms, blocks: Dict[str, object], weights: LossWeights,
                      fine_specular: bool = False) -> Dict[str, DiffValue]:
    """Weighted prior and map regularisers for the scene's stage."""
    context = scene.context
    atlas = context.atlas
    coverage = atlas.coverage
    terms: Dict[str, DiffValue] = {}
    if scene.stage == "coarse":
        terms["prior"] = weights.w_p * prior_loss(blocks["alpha"], blocks["beta"], context.bundle)
        terms["softbox"] = weights.w_b * softbox_loss(blocks["delta"])
        return terms

    if scene.stage == "medium":
        diffuse, specular = scene.medium_diffuse, scene.medium_specular
        terms["symmetry"] = weights.w_s * (symmetry_loss(diffuse, context.bundle, atlas)
                                           + symmetry_loss(specular, context.bundle, atlas))
        terms["consistency_diffuse"] = weights.w_c_diffuse * consistency_loss(diffuse, scene.diffuse_base, coverage)
        terms["consistency_specular"] = weights.w_c_specular * consistency_loss(specular, scene.specular_base,
                                                                                coverage)
        terms["smoothness"] = weights.w_m * (smoothness_loss(diffuse, context.texel_adjacency)
                                             + smoothness_loss(specular, context.texel_adjacency))
        terms["softbox"] = weights.w_b_medium * (softbox_loss(diffuse, coverage) + softbox_loss(specular, coverage))
        return terms

    diffuse = scene.diffuse_map
    symmetry = symmetry_loss(diffuse, context.bundle, atlas)
    consistency = consistency_loss(diffuse, scene.medium_diffuse, coverage)
    smoothness = smoothness_loss(diffuse, context.texel_adjacency) + smoothness_loss(scene.normal_map,
                                                                                     context.texel_adjacency)
    softbox = softbox_loss(diffuse, coverage)
    if fine_specular:
        specular = scene.specular_map
        symmetry = symmetry + symmetry_loss(specular, context.bundle, atlas)
        consistency = consistency + consistency_loss(specular, scene.medium_specular, coverage)
        smoothness = smoothness + smoothness_loss(specular, context.texel_adjacency)
        softbox = softbox + softbox_loss(specular, coverage)
    terms["symmetry"] = weights.w_s_fine * symmetry
    terms["consistency_diffuse"] = weights.w_c_fine * consistency
    terms["smoothness"] = weights.w_m_fine * smoothness
    terms["softbox"] = weights.w_b_fine * softbox
    return terms


def stage_loss(stage: str, context: SceneContext, blocks: Dict[str, object], image: np.ndarray,
               landmarks: Optional[np.ndarray], weights: LossWeights, render: RenderConfig,
               seed: Optional[int] = None, tape: Optional[Tape] = None,
               fine_specular: bool = False) -> StageLoss:
    """
    Evaluate one stage's composite objective.

    Args:
        stage: "coarse", "medium" or "fine"
        context: per-bundle precomputation
        blocks: every scene parameter block; trainable ones as tape values
        image: (H, W, 3) linear target
        landmarks: (68, 2) pixel positions, or None when w_lm = 0
        weights: (scheduled) loss weights
        render: tracer options
        seed: Monte-Carlo seed for this evaluation
        tape: tape receiving discrete decisions
        fine_specular: regularise the fine specular increment

    Returns:
        StageLoss with total and weighted terms
    """
    scene = assemble_scene(context, blocks, stage, tape=tape)
    terms, output, visible = data_terms(scene, image, landmarks, weights, render, seed=seed, tape=tape)
    terms.update(regularizer_terms(scene, blocks, weights, fine_specular=fine_specular))
    total = _accumulate(terms)
    logger.debug("%s loss %.6g (%s)", stage, float(total.value),
                 ", ".join(f"{name}={float(term.value):.4g}" for name, term in terms.items()))
    return StageLoss(total=total, terms=terms, render=output, visible=visible)


def stage_objective(stage: str, context: SceneContext, frozen: Dict[str, np.ndarray], image: np.ndarray,
                    landmarks: Optional[np.ndarray], weights: LossWeights, render: RenderConfig,
                    seed: Optional[int] = None, fine_specular: bool = False
                    ) -> Callable[[Dict[str, DiffValue], Tape], DiffValue]:
    """
    The stage loss as a function of its trainable blocks, for `record` and `check_gradients`.

    Blocks missing from the call's variables are taken from `frozen`.
    """
    def objective(variables: Dict[str, DiffValue], tape: Tape) -> DiffValue:
        blocks = dict(frozen)
        blocks.update(variables)
        return stage_loss(stage, context, blocks, image, landmarks, weights, render, seed=seed, tape=tape,
                          fine_specular=fine_specular).total

    return objective


def split_blocks(blocks: Dict[str, np.ndarray], trainable: Iterable[str]):
    """(trainable, frozen) dictionaries of copied blocks."""
    trainable = list(trainable)
    unknown = set(trainable) - set(blocks)
    if unknown:
        raise LossError(f"unknown parameter blocks {sorted(unknown)}")
    train = {name: np.array(blocks[name], dtype=np.float64) for name in trainable}
    frozen = {name: np.array(value, dtype=np.float64) for name, value in blocks.items() if name not in train}
    return train, frozen
