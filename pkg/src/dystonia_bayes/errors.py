"""Exception hierarchy.

Validation problems (bad input files, bad flags) derive from ``ValidationError``;
numerical failures during sampling derive from ``SamplerError``. The CLI maps the
two families onto different exit codes.
"""


class DystoniaBayesError(Exception):
    pass


class ValidationError(DystoniaBayesError):
    pass


class SchemaError(ValidationError):
    pass


class MalformedRow(ValidationError):
    def __init__(self, line_no, message):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}")


class InvariantViolation(ValidationError):
    pass


class MissingBaseline(ValidationError):
    pass


class UnknownCovariate(ValidationError):
    pass


class EmptySpec(ValidationError):
    pass


class NonFinite(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class InvalidLayout(ValidationError):
    pass


class SpecMismatch(ValidationError):
    pass


class InsufficientDraws(ValidationError):
    pass


class SamplerError(DystoniaBayesError):
    def __init__(self, message, sweep=None, chain_id=None):
        self.sweep = sweep
        self.chain_id = chain_id
        super().__init__(message)

    def at(self, sweep, chain_id=None):
        """Return a copy of this error tagged with the sweep (and chain) it came from."""
        where = f"sweep {sweep}" if chain_id is None else f"chain {chain_id}, sweep {sweep}"
        base = self.args[0] if self.args else ""
        err = type(self)(f"{base} ({where})", sweep=sweep, chain_id=chain_id)
        return err


class SingularSystem(SamplerError):
    pass


class DegenerateSS(SamplerError):
    pass
