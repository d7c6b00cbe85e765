class SarGraphError(Exception):
    """Base class for all engine errors"""


class InputError(SarGraphError):
    """Invalid user input: files, ids, config values, shapes"""


class ProtocolError(SarGraphError):
    """Peer sent something that violates the wire or SAR protocol"""


class ContractViolation(SarGraphError):
    """An internal precondition was broken"""


class TransportAbort(SarGraphError):
    """A peer failed, timed out or the job was aborted"""
