class SpectrumTradingError(Exception):
    """Base class for every error raised by the trading simulator."""


class TopologyError(SpectrumTradingError, ValueError):
    pass


class UnreachableError(SpectrumTradingError, ValueError):
    """No modulation format reaches the requested distance."""


class EmbeddingError(SpectrumTradingError):
    """A VON could not be embedded (no feasible route or FS block)."""


class EmbeddingBudgetExceeded(EmbeddingError):
    def __init__(self, von_id: int, attempts: int):
        super().__init__(f"VON {von_id} failed to embed after {attempts} attempts")
        self.von_id = von_id
        self.attempts = attempts


class SpectrumAuditError(SpectrumTradingError, AssertionError):
    pass


class ProtocolViolation(SpectrumTradingError):
    """An actor received a message that does not fit its current phase."""


class ChainFormatError(SpectrumTradingError, ValueError):
    """Malformed or out-of-range data in the canonical chain encoding."""
