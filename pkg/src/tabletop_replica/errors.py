"""Failure modes raised by the reconstruction and labeling pipeline."""


class PipelineError(Exception):
    """Base class for all pipeline-level failures."""


class DegenerateCloud(PipelineError):
    """Point cloud too small or too flat to anchor a normalization scale."""


class TooFewPoints(PipelineError):
    """Not enough points to fit local surface planes."""


class EmptyField(PipelineError):
    """Occupancy field has no 0.5 crossing anywhere in the extraction cube."""


class NoObjects(PipelineError):
    """Every object instance in the scene failed to reconstruct."""


class PlacementExhausted(PipelineError):
    """Rejection sampling could not place an object without collision."""


class NoCandidates(PipelineError):
    """Antipodal sampling found no feasible grasp on the target."""
