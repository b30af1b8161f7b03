"""Exception types shared across the package."""


class FedRecError(Exception):
    """Base class; the CLI maps subclasses onto exit codes."""


class ConfigError(FedRecError, ValueError):
    """Invalid configuration or precondition (CLI exit code 2)."""


class ParseError(FedRecError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(message)
        self.line = line


class IntegrityError(FedRecError, ValueError):
    pass


class EncodingError(FedRecError, ValueError):
    pass


class TrainingDivergedError(FedRecError, FloatingPointError):
    def __init__(self, message: str, epoch: int, batch: int, client: int | None = None, round: int | None = None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.client = client
        self.round = round


class ChatError(FedRecError):
    pass


class TransportError(ChatError):
    """Timeouts and connection failures; retried by ``chat_complete``."""


class ProtocolError(ChatError):
    def __init__(self, message: str, status: int):
        super().__init__(message)
        self.status = status


class BudgetExhaustedError(ChatError):
    pass


class StageError(FedRecError, RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
