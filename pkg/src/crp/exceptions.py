"""Exception hierarchy shared by every pipeline stage."""


class CrpError(Exception):
    """Base class for all pipeline errors."""


class InputError(CrpError):
    """Input files are missing or malformed (CLI exit code 2)."""


class MissingFile(InputError):
    def __init__(self, path):
        self.path = str(path)
        super().__init__(f"missing input file: {self.path}")


class SchemaViolation(InputError):
    def __init__(self, file, message, row=None, column=None):
        self.file = str(file)
        self.row = row
        self.column = column
        where = self.file
        if row is not None:
            where += f" row {row}"
        if column is not None:
            where += f" column {column!r}"
        super().__init__(f"{where}: {message}")


class DanglingReference(InputError):
    def __init__(self, kind, entity, target, file=None):
        self.kind = kind
        self.entity = entity
        self.target = target
        self.file = file
        prefix = f"{file}: " if file else ""
        super().__init__(f"{prefix}{kind} {entity!r} references unknown {target!r}")


class OutOfRange(CrpError, ValueError):
    pass


class EmptyInput(CrpError, ValueError):
    pass


class NoCommuters(CrpError):
    pass


class NoEmployees(CrpError):
    pass


class ZeroDenominator(CrpError):
    pass


class InsufficientData(CrpError):
    pass


class SingularSystem(CrpError):
    pass


class NonConvergence(CrpError):
    pass


class RankDeficient(CrpError):
    def __init__(self, columns):
        self.columns = list(columns)
        super().__init__(f"design matrix is rank deficient; aliased columns: {', '.join(self.columns)}")


class UnknownRiskFactor(CrpError, KeyError):
    pass


class EmptyModelFrame(CrpError):
    pass


class VaccinationPeriodRule(CrpError):
    pass


class StaleUpstream(CrpError):
    """An upstream stage is missing or its recorded digests no longer match (exit code 3)."""
