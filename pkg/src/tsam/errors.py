"""Exception taxonomy shared across modules.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError and its subclasses -> 3, numeric failures -> 4.
"""


class TsamError(Exception):
    pass


class ConfigError(TsamError):
    """Invalid configuration value, unknown key, or unusable flag combination."""


class DataError(TsamError):
    """Problem with an input dataset or binary artifact."""


class ParseError(DataError):
    """Malformed text input; message carries file and line number."""


class BankFormatError(DataError):
    """MMTK token bank violates the binary layout."""


class BadMagicError(BankFormatError):
    pass


class VersionMismatchError(BankFormatError):
    pass


class TruncatedBankError(BankFormatError):
    pass


class ModalityMismatchError(BankFormatError):
    pass


class CheckpointError(DataError):
    """Checkpoint file unreadable or inconsistent."""


class CheckpointVersionError(CheckpointError):
    pass


class ContractViolation(TsamError):
    """A caller broke an API precondition."""


class NumericFailure(TsamError):
    """Training or evaluation produced non-finite values."""


class TrainingDivergedError(NumericFailure):
    def __init__(self, epoch, batch, detail=""):
        self.epoch = epoch
        self.batch = batch
        msg = f"non-finite loss at epoch {epoch}, batch {batch}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
