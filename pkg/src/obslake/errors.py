"""Exception hierarchy shared by every layer of the lakehouse."""


class ObsLakeError(Exception):
    """Base class for domain errors (CLI maps these to exit code 1)."""


class ParseError(ObsLakeError):
    pass


class EmptyPayload(ObsLakeError):
    pass


# segment format
class SchemaMismatch(ObsLakeError):
    pass


class IoFailure(ObsLakeError):
    pass


class SegmentExists(IoFailure):
    pass


class ChecksumMismatch(ObsLakeError):
    pass


class CorruptEncoding(ObsLakeError):
    pass


# catalog
class NotALakehouse(ObsLakeError):
    pass


class VersionTooNew(ObsLakeError):
    pass


class CommitContention(ObsLakeError):
    pass


class EmptyTransaction(ObsLakeError):
    pass


class TransactionClosed(ObsLakeError):
    pass


class UnknownSnapshot(ObsLakeError):
    pass


class DuplicateColumn(ObsLakeError):
    pass


class InvalidPartitionKey(ObsLakeError):
    pass


# ingestion
class MalformedStream(ObsLakeError):
    pass


class InvalidDensity(ObsLakeError):
    pass


# analytics
class ReferentialGap(ObsLakeError):
    pass


class UnknownImplementation(ObsLakeError):
    pass


class UnknownCommit(ObsLakeError):
    pass


class EmptyCommonTestSet(ObsLakeError):
    pass
