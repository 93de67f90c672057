"""Fixed 64-bit FNV-1a hash.

Feature hashing and mock-backend lookup tables both key on this hash so
that trained models and recorded fixtures are portable across platforms
and implementations. The seed is folded into the FNV offset basis; seed 0
is plain FNV-1a.
"""

from __future__ import annotations

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF

# Seed baked into shipped models; recorded in every model manifest.
DEFAULT_HASH_SEED = 0


def fnv1a64(data: bytes, seed: int = DEFAULT_HASH_SEED) -> int:
    h = (_FNV_OFFSET ^ seed) & _MASK64
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def text_key(text: str, seed: int = DEFAULT_HASH_SEED) -> str:
    """Hex lookup key for a text, as used by mock-backend response tables."""
    return format(fnv1a64(text.encode("utf-8"), seed), "016x")
