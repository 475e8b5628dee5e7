"""Named random streams derived from one root seed."""
import zlib

import numpy as np


def derive_rng(root_seed, name):
    """Independent generator for stream ``name``; stable across runs and platforms."""
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(entropy=int(root_seed), spawn_key=(key,)))


def derive_seed(root_seed, name):
    return int(derive_rng(root_seed, name).integers(0, 2**31 - 1))
