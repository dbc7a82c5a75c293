class ConfigError(ValueError):
    """Invalid configuration (sizes, shapes, unsupported options)."""


class InputError(ValueError):
    """Malformed or out-of-range input data."""


class MappingError(KeyError):
    """A code has no entry in its mapping table."""

    def __init__(self, code: str, code_type: str):
        self.code = code
        self.code_type = code_type
        super().__init__(f"no mapping for {code_type} code {code!r}")

    def __str__(self) -> str:
        return self.args[0]


class StateError(RuntimeError):
    """Operation called on a model that lacks the required component."""


class StageError(RuntimeError):
    """Pipeline stage failure; carries the stage name for the CLI exit message."""

    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"[{stage}] {message}")
