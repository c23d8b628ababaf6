"""Errors raised across the simulation engine.

Every error carries the process exit code the CLI reports for it.
"""

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4


class LoraFedError(ValueError):
    exit_code = EXIT_RUNTIME


class StructuralError(LoraFedError):
    """Shapes or dimensions that do not fit together."""

    exit_code = EXIT_RUNTIME


class InputError(LoraFedError):
    """Bad data: empty batches, malformed CSV rows, out-of-range labels."""

    exit_code = EXIT_DATA


class PartitionError(InputError):
    pass


class ConfigurationError(LoraFedError):
    exit_code = EXIT_CONFIG


class ExtensionPointError(ConfigurationError):
    def __init__(self, name: str):
        super().__init__(f"strategy '{name}' is not implemented — extension point")
        self.name = name
