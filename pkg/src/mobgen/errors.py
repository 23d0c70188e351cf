class MobgenError(Exception):
    """Base class for all errors raised by mobgen."""


class ParseError(MobgenError):
    pass


class EmptyAreaError(MobgenError):
    pass


class EmptyModelError(MobgenError):
    pass


class EmptyGraphError(MobgenError):
    pass


class SchemaError(MobgenError):
    pass


class DegenerateChoiceError(MobgenError):
    pass


class FitError(MobgenError):
    pass


class BundleError(MobgenError):
    """Calibration bundle is missing, malformed or incomplete."""


class EmptySurveyError(MobgenError):
    pass
