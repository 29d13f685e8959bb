"""Exception types.

Every error carries a ``category`` used by the CLI to pick an exit status:
``config``, ``io``, ``numeric`` or ``not-converged``.
"""


class CTBodyError(Exception):
    category = "numeric"


class ConfigError(CTBodyError):
    category = "config"


class DimensionMismatch(ConfigError):
    pass


class InvalidRange(ConfigError):
    pass


class BadMask(ConfigError):
    pass


class MissingBeta(ConfigError):
    pass


class MissingCamera(ConfigError):
    pass


class IoError(CTBodyError):
    category = "io"


class EmptyMesh(CTBodyError):
    pass


class EmptyMask(CTBodyError):
    pass


class EmptyDepthMap(CTBodyError):
    pass


class NoValidPixels(CTBodyError):
    pass


class NoIntersection(CTBodyError):
    pass


class NonPositiveVariance(CTBodyError):
    pass


class SingularNormalEquations(CTBodyError):
    pass


class NotConverged(CTBodyError):
    category = "not-converged"
