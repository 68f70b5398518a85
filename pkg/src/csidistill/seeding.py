"""Labeled seed derivation.

Every random stream in the pipeline is derived from one root seed plus a
string label (and optional integer indices), so a single number reproduces
a whole experiment and independent tasks get independent streams.
"""

import hashlib

import numpy as np


def derive(root: int, *labels) -> int:
    """Derive a 64-bit child seed from a root seed and a label path.

    Uses SHA-256 so the derivation is stable across platforms and Python
    processes (unlike the builtin salted ``hash``).
    """
    h = hashlib.sha256()
    h.update(str(int(root)).encode())
    for part in labels:
        h.update(b"/")
        h.update(str(part).encode())
    return int.from_bytes(h.digest()[:8], "little")


def generator(root: int, *labels) -> np.random.Generator:
    """A PCG64 generator seeded by :func:`derive`."""
    return np.random.Generator(np.random.PCG64(derive(root, *labels)))
