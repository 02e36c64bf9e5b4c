"""Exception hierarchy. Configuration problems map to CLI exit code 2,
everything else under SycamError to exit code 1."""


class SycamError(Exception):
    pass


class TensorFormatError(SycamError):
    """Malformed SYCTNS01 file: bad magic/header, length mismatch, non-finite data."""


class DatasetError(SycamError):
    """Dataset invariant violation; names the offending record and field."""

    def __init__(self, message: str, record_id: str | None = None, field: str | None = None):
        self.record_id = record_id
        self.field = field
        prefix = ""
        if record_id is not None:
            prefix += f"record {record_id!r}: "
        if field is not None:
            prefix += f"field {field!r}: "
        super().__init__(prefix + message)


class ExprSyntaxError(SycamError):
    """Expression parse failure; carries the character position."""

    def __init__(self, message: str, position: int):
        self.position = position
        super().__init__(f"{message} (at position {position})")


class EvalError(SycamError):
    """Expression not evaluable on a record (missing terminal, no guard branch...)."""


class CapabilityError(SycamError):
    """A metric requires record fields the dataset does not provide."""

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        super().__init__(message)


class BackendError(SycamError):
    """Classification backend failure (transport, model, shape)."""


class ConfigError(SycamError):
    """Invalid run configuration; names the offending field."""

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        super().__init__(message if field is None else f"{field}: {message}")
