"""Exception hierarchy.

Every error raised on bad input derives from :class:`TaintflowError`; the
``exit_code`` attribute is what the command line reports.
"""


class TaintflowError(Exception):
    exit_code = 1


class ConfigError(TaintflowError, ValueError):
    exit_code = 9


# ledger ---------------------------------------------------------------------

class LedgerError(TaintflowError):
    exit_code = 3


class ParseError(LedgerError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DanglingInput(LedgerError):
    pass


class DoubleSpend(LedgerError):
    pass


class NonMonotonicValue(LedgerError):
    """A negative output value or a transaction spending more than it receives."""


class NonCausalSpend(LedgerError):
    """A transaction spends an output created later than itself."""


class UnknownTx(LedgerError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


# actors ---------------------------------------------------------------------

class ActorError(TaintflowError):
    exit_code = 4


class UnknownType(ActorError, ValueError):
    pass


class ConflictingLabel(ActorError):
    pass


class EmptyCorpus(ActorError, ValueError):
    pass


# taint ----------------------------------------------------------------------

class TaintError(TaintflowError):
    exit_code = 5


class SeedNotFound(TaintError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


# walks ----------------------------------------------------------------------

class WalkError(TaintflowError):
    exit_code = 6


class EmptyAfterPruning(WalkError):
    pass


# embed ----------------------------------------------------------------------

class EmbedError(TaintflowError):
    exit_code = 7


class EmptyVocabulary(EmbedError):
    pass


class NonFiniteLoss(EmbedError, FloatingPointError):
    def __init__(self, epoch, step):
        self.epoch = epoch
        self.step = step
        super().__init__(f"non-finite loss at epoch {epoch}, step {step}")


class NoKnownTokens(EmbedError):
    pass


# eval -----------------------------------------------------------------------

class EvalError(TaintflowError):
    exit_code = 8


class TooFewSamples(EvalError, ValueError):
    pass


class DegenerateData(EvalError, ValueError):
    pass


class LengthMismatch(EvalError, ValueError):
    pass
