"""Exception hierarchy. Every domain failure derives from RebalanceForgeError
so the CLI can map it to exit code 1."""


class RebalanceForgeError(Exception):
    pass


class ManifestError(RebalanceForgeError):
    pass


class EmptyPopulationError(RebalanceForgeError):
    pass


class InjectionError(RebalanceForgeError):
    pass


class ShapeError(RebalanceForgeError):
    pass


class FoldPlanError(RebalanceForgeError):
    pass


class MetricsError(RebalanceForgeError):
    pass
