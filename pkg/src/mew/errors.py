"""Exception types shared across the pipeline.

Every error carries an exit code so the CLI can map it without a lookup
table: validation problems exit with 2, runtime failures with 3.
"""


class MewError(Exception):
    exit_code = 3

    def __init__(self, message, **details):
        super().__init__(message)
        self.details = details

    def to_json(self):
        return {"error": type(self).__name__, "message": str(self), "details": self.details}


class ValidationError(MewError):
    exit_code = 2


class MissingColumn(ValidationError):
    def __init__(self, column, path=None):
        super().__init__(f"missing column {column!r}", column=column, path=path)


class NonFiniteValue(ValidationError):
    def __init__(self, row, column):
        super().__init__(f"non-finite value at row {row}, column {column!r}", row=row, column=column)
        self.row = row
        self.column = column


class DuplicateCellId(ValidationError):
    def __init__(self, cell_id, row=None):
        super().__init__(f"duplicate cell_id {cell_id}", cell_id=cell_id, row=row)
        self.cell_id = cell_id


class EmptyTable(ValidationError):
    pass


class InvalidValue(ValidationError):
    pass


class InvalidConfig(ValidationError):
    pass


class InvalidManifest(ValidationError):
    pass


class TooFewCells(ValidationError):
    pass


class NoSeedLabels(ValidationError):
    pass


class DegenerateInput(ValidationError):
    pass


class EmptyEdgeList(ValidationError):
    pass


class UntypedNode(ValidationError):
    def __init__(self, index):
        super().__init__(f"node {index} has no cell type", index=int(index))
        self.index = int(index)


class IndexOutOfRange(ValidationError):
    pass


class DimMismatch(ValidationError):
    pass


class EmptyGraph(ValidationError):
    pass


class SingleClass(ValidationError):
    pass


class NoComparablePairs(ValidationError):
    pass


class NoValidLabels(ValidationError):
    pass


class NoEvents(MewError):
    """All subjects in a hazard batch are censored; the batch contributes nothing."""


class CacheError(MewError):
    pass


class BadMagic(CacheError):
    pass


class VersionMismatch(CacheError):
    pass


class TruncatedFile(CacheError):
    pass


class MissingCache(MewError):
    pass


class ChecksumMismatch(CacheError):
    pass
