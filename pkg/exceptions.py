"""Error types raised by the toolkit"""


class ToppError(Exception):
    pass


class ConfigurationError(ToppError):
    pass


class FitError(ToppError):

    def __init__(self, message, segment=None):
        super().__init__(message)
        self.segment = segment


class FlatnessSingularityError(ToppError):

    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


class DegenerateIntervalError(ToppError):

    def __init__(self, message, interval=None):
        super().__init__(message)
        self.interval = interval


class AssemblyError(ToppError):
    pass


class InfeasibleScalingError(ToppError):
    pass


class TrajectoryIOError(ToppError):

    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path
