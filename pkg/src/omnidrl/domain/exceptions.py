class OmniDRLError(Exception):
    """Base class for every error raised by omnidrl"""


class GeometryDomainError(OmniDRLError, ValueError):
    """Input outside the domain of a geometric operation (zero-norm point, zero line moment)"""


class ProjectionAtInfinityError(OmniDRLError):
    """A point whose shifted sphere coordinate n_z is within epsilon of zero"""


class OutOfFovError(OmniDRLError):
    """A pixel or point outside the valid region of the camera model"""


class DegenerateSegmentError(OmniDRLError):
    """Segment endpoints collinear with the projection center"""


class EmptyEnvelopeError(OmniDRLError):
    """The pixel envelope of a projected box is empty after clipping to the image"""


class ContractViolationError(OmniDRLError):
    """An operation was called outside its precondition (trigger passed to apply_action, stepping a finished episode)"""


class DatasetError(OmniDRLError):
    """Missing, empty or inconsistent dataset"""


class CheckpointMismatchError(OmniDRLError):
    """Checkpoint incompatible with the configuration or dataset it is used with"""


class TrainingDivergedError(OmniDRLError):
    """A training loss became non-finite"""
