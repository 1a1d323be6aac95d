"""Stable seed derivation.

Python's builtin ``hash`` is salted per process, so reproducible runs derive
child seeds by hashing a label path with SHA-256 instead. Seeds depend only
on their labels, never on execution order.
"""
from __future__ import annotations

import hashlib


def derive_seed(*parts) -> int:
    """Deterministic 63-bit seed from a sequence of labels."""
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF
