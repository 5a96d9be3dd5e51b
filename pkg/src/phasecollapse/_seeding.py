import zlib

import numpy as np


def rng_stream(seed: int, name: str, *index: int) -> np.random.Generator:
    """Independent generator for the named sub-stream of a master seed.

    Streams depend only on ``(seed, name, index)``, never on call order.
    """
    key = [int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode()), *(int(i) for i in index)]
    return np.random.default_rng(np.random.SeedSequence(key))
