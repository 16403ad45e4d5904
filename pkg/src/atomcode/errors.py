"""Exception hierarchy shared across atomcode modules."""


class AtomcodeError(Exception):
    """Base class for all errors raised by atomcode."""


# -- table / ledger ---------------------------------------------------------


class FormatError(AtomcodeError):
    """A file could not be parsed (e.g. a CSV without a header row)."""


class SchemaError(AtomcodeError):
    """Structural rule violated: bad column names, bad template, bad record."""


class DuplicateRunError(AtomcodeError):
    pass


class IoError(AtomcodeError, OSError):
    """Filesystem failure while reading or writing atomcode state."""


class NotFoundError(AtomcodeError, LookupError):
    pass


# -- segmentation / rendering -----------------------------------------------


class EmptyDocumentError(AtomcodeError):
    pass


class MissingFieldError(AtomcodeError, KeyError):
    def __str__(self) -> str:
        # KeyError.__str__ repr()s the message
        return str(self.args[0]) if self.args else ""


class EmptyDataError(AtomcodeError, ValueError):
    pass


# -- engine -----------------------------------------------------------------


class StaleCheckpointError(AtomcodeError):
    """The table changed shape since the checkpoint was written."""


class LockedError(AtomcodeError):
    """Another live process holds the run lock on a table."""


class JobInterrupted(AtomcodeError):
    """A run stopped before every row was processed.

    The partial state is already checkpointed and ledgered; ``session_id``
    names the session to resume.
    """

    def __init__(self, message: str, session_id: str, checkpoint_path: str):
        super().__init__(message)
        self.session_id = session_id
        self.checkpoint_path = checkpoint_path


# -- statistics -------------------------------------------------------------


class InsufficientData(AtomcodeError, ValueError):
    pass


# -- providers --------------------------------------------------------------


class ProviderError(AtomcodeError):
    retryable = False

    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class AuthError(ProviderError):
    pass


class RateLimited(ProviderError):
    retryable = True


class ServerError(ProviderError):
    retryable = True


class NetworkError(ProviderError):
    retryable = True


class MalformedResponse(ProviderError):
    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{message} (at {path})" if path else message)
        self.path = path


class RetriesExhausted(ProviderError):
    def __init__(self, last: ProviderError, attempts: int):
        super().__init__(f"gave up after {attempts} attempts: {last}", status=last.status)
        self.last = last
        self.attempts = attempts


class NotApplicable(ProviderError):
    """Operation has no meaning for this provider kind (e.g. wire encoding for mock)."""
