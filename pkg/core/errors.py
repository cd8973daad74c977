"""
Exception hierarchy for the garment deformation engine.
Every error raised by the engine derives from Garment3DError; each family also
subclasses the closest builtin so generic handlers keep working.
"""

from typing import Iterable, List, Optional, Sequence, Tuple


class Garment3DError(Exception):
    """Base class for all engine errors."""

    exit_code = 3


# ── Mesh ──────────────────────────────────────────────────────────────────

class MeshError(Garment3DError, ValueError):
    exit_code = 2


class ObjParseError(MeshError):
    """Malformed OBJ record; carries the 1-based line number."""

    def __init__(self, message: str, line_number: Optional[int] = None, path: str = ""):
        self.line_number = line_number
        self.path = path
        where = f"{path}:{line_number}: " if line_number is not None else ""
        super().__init__(f"{where}{message}")


class DegenerateFaceError(MeshError):
    def __init__(self, faces: Sequence[int], threshold: float):
        self.faces = list(int(f) for f in faces)
        shown = ", ".join(str(f) for f in self.faces[:20])
        more = f" (+{len(self.faces) - 20} more)" if len(self.faces) > 20 else ""
        super().__init__(
            f"{len(self.faces)} face(s) with area <= {threshold:g}: {shown}{more}"
        )


class NonManifoldEdgeError(MeshError):
    def __init__(self, edges: Iterable[Tuple[int, int]]):
        self.edges: List[Tuple[int, int]] = [(int(a), int(b)) for a, b in edges]
        shown = ", ".join(f"({a},{b})" for a, b in self.edges[:20])
        super().__init__(f"{len(self.edges)} edge(s) shared by more than 2 faces: {shown}")


class ZeroExtentError(MeshError):
    pass


class MissingUVError(MeshError):
    pass


class BodyModelError(MeshError):
    pass


# ── Solver ────────────────────────────────────────────────────────────────

class SolverError(Garment3DError, RuntimeError):
    pass


class FactorizationError(SolverError):
    pass


class NonFiniteInputError(SolverError, ValueError):
    pass


# ── Rendering ─────────────────────────────────────────────────────────────

class RenderError(Garment3DError, ValueError):
    pass


class ResolutionMismatchError(RenderError):
    pass


# ── Losses ────────────────────────────────────────────────────────────────

class LossError(Garment3DError, ValueError):
    pass


class EmptyPointSetError(LossError):
    pass


class IsolatedVertexError(LossError):
    def __init__(self, vertices: Sequence[int]):
        self.vertices = [int(v) for v in vertices]
        super().__init__(
            f"{len(self.vertices)} isolated vertex/vertices without neighbours: "
            f"{self.vertices[:20]}"
        )


class NonFiniteLossError(LossError):
    def __init__(self, term: str, value: float):
        self.term = term
        self.value = value
        super().__init__(f"loss term '{term}' is not finite ({value})")


# ── Embedding providers ───────────────────────────────────────────────────

class ProviderError(Garment3DError, RuntimeError):
    exit_code = 4

    def __init__(self, message: str, view_index: Optional[int] = None):
        self.view_index = view_index
        self.message = message
        prefix = f"view {view_index}: " if view_index is not None else ""
        super().__init__(f"{prefix}{message}")

    def for_view(self, view_index: int) -> "ProviderError":
        """Return a copy of this error tagged with the failing view index."""
        err = self.__class__.__new__(self.__class__)
        ProviderError.__init__(err, self.message, view_index)
        for key, value in self.__dict__.items():
            if key not in ("view_index", "message"):
                setattr(err, key, value)
        return err


class EmbeddingTimeoutError(ProviderError, TimeoutError):
    pass


class EmbeddingHTTPError(ProviderError):
    def __init__(self, message: str, status_code: int = 0, view_index: Optional[int] = None):
        self.status_code = status_code
        super().__init__(message, view_index)


class MalformedResponseError(ProviderError):
    pass


class EmptyImageError(ProviderError, ValueError):
    pass


# ── Optimization / checkpoints ────────────────────────────────────────────

class OptimizationError(Garment3DError, RuntimeError):
    pass


class DivergenceError(OptimizationError):
    def __init__(self, iteration: int, term: str, value: float):
        self.iteration = iteration
        self.term = term
        super().__init__(f"iteration {iteration}: loss term '{term}' diverged ({value})")


class CheckpointError(Garment3DError, ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


# ── Pipeline ──────────────────────────────────────────────────────────────

class PipelineError(Garment3DError):
    pass


class ConfigValidationError(PipelineError, ValueError):
    exit_code = 2


class StageError(PipelineError, RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")

    @property
    def exit_code(self) -> int:  # type: ignore[override]
        if isinstance(self.cause, ProviderError):
            return ProviderError.exit_code
        return 3


def exit_code_for(error: BaseException) -> int:
    """Map an exception to the CLI exit code."""
    if isinstance(error, Garment3DError):
        return error.exit_code
    return 3
