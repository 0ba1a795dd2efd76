"""Exception hierarchy shared by all pipeline stages."""


class PipelineError(Exception):
    """Base class for every error raised by this package."""


# --- serialization ---------------------------------------------------------

class EncodingError(PipelineError):
    """Text cannot be encoded as UTF-8."""


class SchemaError(PipelineError):
    """A serialized record is missing a required field."""

    def __init__(self, field: str):
        super().__init__(f"missing required field: {field}")
        self.field = field


class RecordParseError(PipelineError):
    """A serialized record is not valid JSON."""


# --- ingest ----------------------------------------------------------------

class LmFormatError(PipelineError):
    """Language-model output could not be parsed after all retries."""


class RateLimited(PipelineError):
    def __init__(self, retry_after: float):
        super().__init__(f"rate limited, retry after {retry_after}s")
        self.retry_after = retry_after


class TransportError(PipelineError):
    """Network-level failure talking to a remote API."""


class RepoNotFound(PipelineError):
    pass


class DiffUnavailable(PipelineError):
    def __init__(self, pr_number: int):
        super().__init__(f"diff unavailable for PR #{pr_number}")
        self.pr_number = pr_number


class EmptyInput(PipelineError):
    pass


# --- patchkit --------------------------------------------------------------

class DiffParseError(PipelineError):
    def __init__(self, message: str, line_no: int):
        super().__init__(f"{message} (line {line_no})")
        self.line_no = line_no


class BinaryUnsupported(PipelineError):
    """Binary patches are out of scope."""


class ApplyConflict(PipelineError):
    def __init__(self, file: str, hunk: int):
        super().__init__(f"hunk {hunk} does not apply to {file}")
        self.file = file
        self.hunk = hunk


class MissingTarget(PipelineError):
    """Patch references a file absent from the tree."""


class EditNotFound(PipelineError):
    def __init__(self, file: str, excerpt: str):
        super().__init__(f"search block not found in {file}: {excerpt!r}")
        self.file = file
        self.excerpt = excerpt


class EmptyEdit(PipelineError):
    """An edit set that changes nothing."""


class SrParseError(PipelineError):
    def __init__(self, block_index: int, message: str = "malformed search/replace block"):
        super().__init__(f"{message} (block {block_index})")
        self.block_index = block_index


class Unsupported(PipelineError):
    """Requested language or feature is not supported."""


# --- mirror ----------------------------------------------------------------

class LocalizationEmpty(PipelineError):
    """Every path returned by localization was hallucinated."""


class TestScopeViolation(PipelineError):
    """A test-generation edit touched a non-test file."""


class SourceScopeViolation(PipelineError):
    """A source-modification edit touched a test file."""


class TestLeakage(PipelineError):
    """A problem statement quotes hidden test content verbatim."""


class StatementUnanchored(PipelineError):
    """A problem statement mentions nothing from the fix patch."""


class GymUnavailable(PipelineError):
    """The gym checkout could not be obtained."""


# --- gymrun / verify -------------------------------------------------------

class ParserAnomaly(PipelineError):
    """A log parser produced no statuses or saw an unknown format."""


class SanityFailure(PipelineError):
    def __init__(self, stage: str):
        super().__init__(f"patch application failed at stage: {stage}")
        self.stage = stage


# --- traj / cli ------------------------------------------------------------

class EvaluationUnavailable(PipelineError):
    """Trajectory lacks the test results needed to judge success."""


class ConfigError(PipelineError):
    pass


class DegenerateSample(PipelineError):
    """A masked trajectory with zero loss-bearing turns."""
