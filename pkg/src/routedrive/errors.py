"""Exception hierarchy shared across the package."""


class RouteDriveError(Exception):
    """Base class for all package errors."""


class DimensionError(RouteDriveError, ValueError):
    pass


class ConfigError(RouteDriveError, ValueError):
    pass


class InputError(RouteDriveError, ValueError):
    pass


class VocabError(RouteDriveError, KeyError):
    def __str__(self) -> str:  # KeyError repr-quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class ContractError(RouteDriveError, RuntimeError):
    """A caller broke an operation's precondition."""


class DataFormatError(RouteDriveError, ValueError):
    """Malformed dataset, config or checkpoint file."""


class SchemaError(DataFormatError):
    pass


class TrainingError(RouteDriveError, RuntimeError):
    pass
