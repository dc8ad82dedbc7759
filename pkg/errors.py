"""
Exception hierarchy for the byte conditioning engine
"""

from typing import Optional, Sequence


class ByteConditioningError(Exception):
    """Base class for every error raised by the engine"""


class ConfigError(ByteConditioningError):
    """Invalid sampler or run configuration"""


class TokenizerLoadError(ByteConditioningError):
    """The tokenizer definition could not be turned into a Tokenizer"""


class UnsupportedModelError(TokenizerLoadError):
    pass


class UnsupportedPretokenizerError(TokenizerLoadError):
    pass


class MalformedMergeError(TokenizerLoadError):
    pass


class UnknownTokenError(ByteConditioningError):
    def __init__(self, token: int):
        super().__init__(f"unknown token id {token}")
        self.token = token


class UnknownByteError(ByteConditioningError):
    def __init__(self, byte: int):
        super().__init__(f"byte 0x{byte:02x} has no base token")
        self.byte = byte


class DeadTreeError(ByteConditioningError):
    """No valid token sequence covers the bytes seen so far"""

    def __init__(self, offset: int, detail: str = ""):
        message = f"no valid tokenization covers the prompt at byte offset {offset}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)
        self.offset = offset


class NotALeafError(ByteConditioningError):
    def __init__(self, token: int):
        super().__init__(f"token {token} is not a final token of any current leaf")
        self.token = token


class ReplayMissError(ByteConditioningError):
    def __init__(self, context: Sequence[int]):
        super().__init__(f"replay file has no record for context {list(context)}")
        self.context = list(context)


class ReplayFormatError(ByteConditioningError):
    def __init__(self, message: str, path: Optional[str] = None):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path
