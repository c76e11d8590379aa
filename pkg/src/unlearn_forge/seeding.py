"""Deterministic seed derivation.

A single root seed drives every stage of an experiment.  Stage seeds are
derived by hashing the decimal root seed together with a stage label
(SHA-256 of ``"{root}/{label}"``, first 8 bytes big-endian, sign bit
cleared).  The derivation is platform independent, so any stage or trial
can be replayed in isolation and parallel workers never share streams.
"""

import hashlib


def derive_seed(root: int, label: str) -> int:
    """Derive a child seed from ``root`` for the stage named ``label``."""
    digest = hashlib.sha256(f"{root}/{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") & 0x7FFF_FFFF_FFFF_FFFF
