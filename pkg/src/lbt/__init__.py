"""Learning-by-teaching pipelines over pluggable chat-completion backends."""

from .gateway import (
    ChatRequest,
    Completion,
    CompletionCache,
    CountingBackend,
    Gateway,
    HttpBackend,
    SamplingParams,
    ScriptedBackend,
    request_digest,
)

__version__ = "0.1.0"

__all__ = [
    "ChatRequest",
    "Completion",
    "CompletionCache",
    "CountingBackend",
    "Gateway",
    "HttpBackend",
    "SamplingParams",
    "ScriptedBackend",
    "request_digest",
    "__version__",
]
