"""Deterministic seed derivation for independent sub-tasks."""

from __future__ import annotations

import hashlib

__all__ = ["derive_seed"]


def derive_seed(master_seed: int, *parts) -> int:
    """Seed for a named sub-task, stable across runs and process order."""
    key = ":".join([str(int(master_seed))] + [str(p) for p in parts])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") % (2**63)
