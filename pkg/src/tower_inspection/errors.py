"""Exception hierarchy shared by the library and the CLI."""


class InspectionError(Exception):
    """Root of every error raised by tower_inspection."""


class InvalidParameters(InspectionError, ValueError):
    """A value type was constructed with parameters outside its documented range."""


class FrameMismatch(InspectionError):
    """Two transforms were chained whose inner frames do not agree."""


class BehindCamera(InspectionError):
    """A point with non-positive camera-frame depth was projected."""


class InvalidDimensions(InvalidParameters):
    """Tower or insulator dimensions are not physically meaningful."""


class SceneFormatError(InspectionError):
    """A scene configuration file is malformed."""


class NonMonotonicTimestamp(InspectionError):
    """A detection arrived with a timestamp older than the buffered one."""


class NoCluster(InspectionError):
    """Clustering produced nothing to localize."""


class DegenerateInput(InspectionError):
    """All points coincide, so no line or axis is defined."""


class NoPointsWithinTau(InspectionError):
    """No point lies within the distance threshold of the fitted axis."""


class InfeasibleStandoff(InspectionError):
    """The requested standoff would place the UAV inside the safety region."""


class NoFeasibleWaypoint(InspectionError):
    """No safe inspection waypoint exists for an insulator."""


class NoFeasibleDetour(InspectionError):
    """Neither the direct segment nor the overflight detour is safe."""


class PlanningFailure(InspectionError):
    """The mission could not plan a leg and was aborted."""


class TooLargeForExact(InspectionError):
    """Exact TSP was requested for an instance above the supported size."""
