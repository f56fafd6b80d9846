"""Two-party post-processing over an explicit classical message exchange."""
from .messages import parse_message, serialize_message
from .parties import AbortReason, Alice, BlockPolicy, Bob, SessionAbort, tag_length
from .records import DetectionRecords, ProtocolError, PulseRecords, sift, transmit
from .runner import (SessionResult, SessionTranscript, audit_transcript, read_key,
                     replay_session, run_session, write_key)
from .transport import memory_pipe

__all__ = [
    "parse_message", "serialize_message", "AbortReason", "Alice", "BlockPolicy", "Bob",
    "SessionAbort", "tag_length", "DetectionRecords", "ProtocolError", "PulseRecords", "sift",
    "transmit", "SessionResult", "SessionTranscript", "audit_transcript", "read_key",
    "replay_session", "run_session", "write_key", "memory_pipe",
]
