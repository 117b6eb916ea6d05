"""Exception hierarchy.

Every error carries a short ``category`` string; the CLI prints it as the
machine-parseable prefix of its one-line failure message.
"""


class RefStyleError(Exception):
    category = "error"


class ParameterError(RefStyleError, ValueError):
    category = "parameter"


class ShapeError(RefStyleError, ValueError):
    category = "shape"


class ConstraintError(RefStyleError, ValueError):
    category = "constraint"


class ConfigError(RefStyleError, ValueError):
    category = "config"


class SiteError(RefStyleError, KeyError):
    category = "site"

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class AdapterContractError(RefStyleError, TypeError):
    category = "adapter-contract"


class CacheMissError(RefStyleError, KeyError):
    category = "cache-miss"

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key

    def __str__(self):
        return str(self.args[0])


class DuplicateEntryError(RefStyleError, KeyError):
    category = "duplicate-entry"

    def __str__(self):
        return str(self.args[0])


class CacheValidationError(RefStyleError, ValueError):
    category = "validation"


class CacheFormatError(RefStyleError, ValueError):
    category = "format"

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CacheVersionError(RefStyleError, ValueError):
    category = "version"
