"""Exception hierarchy shared by all modules."""


class NelsonError(Exception):
    """Base class for every error raised by the package."""


class FieldSyntaxError(NelsonError, SyntaxError):
    """Malformed expression text. ``offset`` is the 0-based character position."""

    def __init__(self, message, source, offset):
        self.source = source
        self.offset = offset
        self.message = message
        super().__init__(f"{message} at offset {offset}: {source!r}")

    def __str__(self):
        return f"{self.message} at offset {self.offset}: {self.source!r}"


class UnknownIdentifier(NelsonError, NameError):
    def __init__(self, name, allowed):
        allowed = tuple(allowed)
        super().__init__(f"unknown identifier {name!r}; declared variables: {', '.join(allowed)}")
        # NameError.__init__ resets .name
        self.name = name
        self.allowed = allowed


class DomainError(NelsonError, ArithmeticError):
    """Evaluation hit a pole, log(0) or produced a non-finite value."""


class DimensionMismatch(NelsonError, ValueError):
    pass


class NonFinitePath(NelsonError, ArithmeticError):
    def __init__(self, path, step, value):
        self.path = path
        self.step = step
        self.value = value
        super().__init__(f"path {path} left the finite region at step {step} (value {value!r})")


class TooFewSamples(NelsonError, ValueError):
    pass


class PreconditionError(NelsonError, ValueError):
    pass


class MissingDensity(PreconditionError):
    pass


class MaskedSite(NelsonError, ValueError):
    """Every requested site lies outside the region where the density is positive."""


class OrderUnsupported(NelsonError, ValueError):
    pass


class NotAdmissible(NelsonError, ValueError):
    pass


class NotInLambdaSigmaG(PreconditionError):
    pass


class NodeInDomain(NelsonError, ValueError):
    """The wave function vanishes inside the domain, splitting it into components."""

    def __init__(self, message, components):
        self.components = components
        super().__init__(message)


class GridTooCoarse(NelsonError, ValueError):
    pass


class ConfigInvalid(NelsonError, ValueError):
    def __init__(self, message, path=()):
        self.path = tuple(path)
        where = "/".join(str(p) for p in self.path) or "<root>"
        super().__init__(f"{where}: {message}")
