"""Root-seed plumbing: named deterministic sub-streams and the f64 switch.

Every random draw in the package flows from one root seed through a named
sub-stream (e.g. ``corpus``, ``init``, ``mask``, ``perm``), so each component
is reproducible in isolation. Names are hashed with crc32, not Python's
``hash``, which is salted per process.
"""

import os
import zlib

import numpy as np

F64_ENV_VAR = "SPEATFORGE_F64"


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def substream(root_seed: int, *names: str) -> np.random.Generator:
    """Return a Generator for the sub-stream addressed by `names`."""
    entropy = [int(root_seed)] + [_name_key(n) for n in names]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def substream_seed(root_seed: int, *names: str) -> int:
    """Derive a plain integer seed (for torch and similar) from a sub-stream."""
    return int(substream(root_seed, *names).integers(0, 2**63 - 1))


def float64_enabled() -> bool:
    """True when SPEATFORGE_F64=1 requests 64-bit accumulation."""
    return os.environ.get(F64_ENV_VAR, "") == "1"
