"""Exception hierarchy shared by all modules."""


class ValvebotError(Exception):
    """Base class for every error raised by this package."""


class InvalidInput(ValvebotError, ValueError):
    pass


class DegenerateRegistration(ValvebotError):
    """ICP found no correspondences within the cutoff distance."""


class RegistrationFailed(ValvebotError):
    """Every yaw seed of the multi-start registration was degenerate."""


class GpsStale(ValvebotError):
    pass


class SearchExhausted(ValvebotError):
    """All search waypoints were visited without finding the panel."""


class InsufficientDetections(ValvebotError):
    pass


class InvalidGeometry(ValvebotError):
    pass


class SelectionFailed(ValvebotError):
    pass


class RegionMissing(ValvebotError):
    """A foreground region is absent from one half of the depth frame.

    ``which`` is ``"mouth"`` or ``"stem"``.
    """

    def __init__(self, which):
        super().__init__(f"no {which} region found")
        self.which = which


class TipsNotFound(ValvebotError):
    pass


class DegenerateGeometry(ValvebotError):
    pass


class InvalidKeyframe(ValvebotError):
    pass


class UsageError(ValvebotError, ValueError):
    pass
