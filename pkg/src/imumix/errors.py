"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class ImuMixError(Exception):
    exit_code = 1


class InputError(ImuMixError):
    """Bad or missing input file, schema or parse failure."""

    exit_code = 2


class SchemaError(InputError):
    pass


class ParseError(InputError):
    def __init__(self, message, row=None):
        super().__init__(message if row is None else f"{message} (row {row})")
        self.row = row


class EmptyInputError(InputError):
    pass


class ConfigError(ImuMixError):
    exit_code = 2


class MappingIncompleteError(ConfigError):
    def __init__(self, label):
        super().__init__(f"label {label!r} has no entry in the label map")
        self.label = label


class UnsupportedResampleError(ConfigError):
    pass


class NumericError(ImuMixError):
    """Non-finite values in filter state, losses or weights."""

    exit_code = 3

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class InvariantError(ImuMixError):
    pass


class MissingArtifactError(ImuMixError):
    exit_code = 4


class PlanError(ImuMixError):
    exit_code = 5
