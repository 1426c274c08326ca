"""Deterministic named random streams.

Every random draw in a run descends from a single root seed through a named
derivation (stage, step, purpose, ...). The same names always produce the
same generator, so any stage of a pipeline can be replayed in isolation
without consuming the streams of other stages.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(root_seed: int, *names: object) -> int:
    """Hash a root seed and a name path into a 64-bit child seed."""
    h = hashlib.sha256()
    h.update(str(int(root_seed)).encode())
    for name in names:
        h.update(b"/")
        h.update(str(name).encode())
    return int.from_bytes(h.digest()[:8], "little")


def stream(root_seed: int, *names: object) -> np.random.Generator:
    """Return a PCG64 generator for the given name path."""
    return np.random.Generator(np.random.PCG64(derive_seed(root_seed, *names)))


def lineage(root_seed: int, *names: object) -> str:
    """Human-readable record of how a stream was derived."""
    return f"{int(root_seed)}/" + "/".join(str(n) for n in names)
