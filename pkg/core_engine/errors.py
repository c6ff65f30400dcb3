"""
Exception hierarchy for the inverse-rendering toolkit.

Every error carries the name of the module that raised it so the command
line can print module-qualified diagnostics.
"""

from typing import Optional


class InverseRenderingError(Exception):
    """Base class for every error raised by the toolkit."""

    module = "core"

    def __init__(self, message: str, module: Optional[str] = None):
        super().__init__(message)
        if module is not None:
            self.module = module

    def qualified(self) -> str:
        return f"[{self.module}] {self}"


class ConfigError(InverseRenderingError, ValueError):
    module = "config"


# scene-model

class BundleError(InverseRenderingError, ValueError):
    module = "scene-model"


class MissingBundleFileError(BundleError, FileNotFoundError):
    pass


class BundleDimensionError(BundleError):
    pass


class MirrorMapError(BundleError):
    pass


class UVRangeError(BundleError):
    pass


class TriangleIndexError(BundleError):
    pass


class CameraError(InverseRenderingError, ValueError):
    module = "scene-model"


# sh-light / shading

class SHError(InverseRenderingError, ValueError):
    module = "sh-light"


class ShadingError(InverseRenderingError, ValueError):
    module = "shading"


# diff-engine

class TapeError(InverseRenderingError, RuntimeError):
    module = "diff-engine"


class NonFiniteError(TapeError, FloatingPointError):
    """Raised when an op produces NaN or Inf while recording."""

    def __init__(self, op: str, node: int):
        super().__init__(f"non-finite value produced by op '{op}' at node {node}")
        self.op = op
        self.node = node


# renderers

class RenderError(InverseRenderingError, ValueError):
    module = "renderer"


# losses / fitting / metrics

class LossError(InverseRenderingError, ValueError):
    module = "losses"


class FitDivergenceError(InverseRenderingError, FloatingPointError):
    module = "fit-pipeline"

    def __init__(self, stage: str, iteration: int):
        super().__init__(f"loss diverged (non-finite) in stage '{stage}' at iteration {iteration}")
        self.stage = stage
        self.iteration = iteration


class MetricError(InverseRenderingError, ValueError):
    module = "metrics"


class ImageIOError(InverseRenderingError, ValueError):
    module = "io"
