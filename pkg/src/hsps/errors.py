"""Exception hierarchy shared by all subpackages."""


class HspsError(Exception):
    """Base class for every error raised by this package."""


class ParameterError(HspsError, ValueError):
    """A parameter record violates its invariants."""


class DataError(HspsError):
    """Input data (tag streams, histograms, files) is malformed or unusable."""


class UnsortedStreamError(DataError):
    pass


class TagBudgetError(HspsError):
    """The requested simulation would exceed the configured tag budget."""

    def __init__(self, expected_tags, budget, bytes_per_tag=9):
        self.expected_tags = int(expected_tags)
        self.budget = int(budget)
        self.required_bytes = int(expected_tags * bytes_per_tag)
        super().__init__(
            f"simulation would produce ~{self.expected_tags:.3e} tags, above the "
            f"budget of {self.budget:.3e}; materializing it needs about "
            f"{self.required_bytes / 2**30:.2f} GiB. Use iter_generate() to stream "
            f"it in shards or raise max_tags."
        )


class FitError(HspsError):
    pass


class IdentifiabilityError(FitError):
    """The fit problem has a flat or nearly flat chi-square direction."""

    def __init__(self, message, direction=None):
        self.direction = direction
        super().__init__(message)


class ConfigError(HspsError):
    """A run configuration failed schema validation or names invalid parameters."""
