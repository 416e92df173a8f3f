from werkzeug.exceptions import InternalServerError, NotFound, UnprocessableEntity


class ConfigError(UnprocessableEntity):
    """Invalid configuration.

    Carries the itemized list of field errors in `errors`.
    """

    exit_code = 2

    def __init__(self, errors):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__("Invalid configuration: " + "; ".join(self.errors))


class ContractViolation(UnprocessableEntity):
    exit_code = 1


class IngestionError(NotFound):
    exit_code = 1


class DependencyError(NotFound):
    """A pipeline stage is missing one of its inputs."""

    exit_code = 3

    def __init__(self, stage, missing):
        self.stage = stage
        self.missing = missing
        super().__init__(f"Stage '{stage}' is missing its input: {missing}")


class NumericalAbort(InternalServerError):
    """A loss or sample became non-finite."""

    exit_code = 4

    def __init__(self, what, step=None):
        self.step = step
        where = "" if step is None else f" at step {step}"
        super().__init__(f"Non-finite {what}{where}")


def check_shape(name, actual, expected):
    """Raise a ContractViolation when `actual` does not match `expected`.

    `None` entries in `expected` match any size.
    """
    actual = tuple(actual)
    expected = tuple(expected)
    if len(actual) != len(expected) or any(
        e is not None and a != e for a, e in zip(actual, expected)
    ):
        raise ContractViolation(
            f"Shape mismatch for {name}: expected {expected}, got {actual}"
        )
