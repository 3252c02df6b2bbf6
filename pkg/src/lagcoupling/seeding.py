"""Seed plumbing: one root seed, named sub-streams, per-task children.

Every random draw in the package comes from a generator built here, so a
run is reproducible from its root seed and parallel tasks get independent
streams that do not depend on scheduling.
"""
import zlib

import numpy as np

__all__ = ["child_seeds", "root_sequence", "substream"]


def _name_key(name):
    return zlib.crc32(name.encode("utf-8"))


def root_sequence(seed):
    """Normalise an int, SeedSequence or Generator to a SeedSequence."""
    if isinstance(seed, np.random.SeedSequence):
        return seed
    if isinstance(seed, np.random.Generator):
        return np.random.SeedSequence(int(seed.integers(2**63)))
    if seed is None:
        return np.random.SeedSequence()
    return np.random.SeedSequence(int(seed))


def substream(seed, name, *keys):
    """SeedSequence for the named stream (and optional integer keys) of ``seed``."""
    root = root_sequence(seed)
    key = tuple(root.spawn_key) + (_name_key(name),) + tuple(int(k) for k in keys)
    return np.random.SeedSequence(root.entropy, spawn_key=key)


def child_seeds(seed, name, n):
    """``n`` independent SeedSequences, one per task, for stream ``name``."""
    return [substream(seed, name, i) for i in range(n)]
