"""Shared tokenizer for the encoder, retrieval and token-F1 similarity."""
import re

_TOKEN = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on anything that is not a letter or digit."""
    return _TOKEN.findall(text.lower())


def normalize_space(text: str) -> str:
    return " ".join(text.split())
