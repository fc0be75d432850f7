"""Tokenizers used for length statistics and for the built-in toy backend.

Token-length statistics are only comparable within a single tokenizer
identity, so every tokenizer carries an ``identity`` string that gets
stamped onto the stats it produces.
"""

from __future__ import annotations


class ByteTokenizer:
    """UTF-8 byte-level tokenizer; one token per byte, vocab size 256."""

    identity = "byte-utf8"
    vocab_size = 256

    def encode(self, text: str) -> list[int]:
        return list(text.encode("utf-8"))


class WhitespaceTokenizer:
    """Whitespace word splitter, for human-readable length stats."""

    identity = "whitespace"

    def encode(self, text: str) -> list[str]:
        return text.split()


_REGISTRY = {
    "bytes": ByteTokenizer,
    "whitespace": WhitespaceTokenizer,
}


def get_tokenizer(name: str):
    try:
        return _REGISTRY[name]()
    except KeyError:
        raise ValueError(
            f"unknown tokenizer '{name}' (choices: {', '.join(sorted(_REGISTRY))})"
        ) from None
