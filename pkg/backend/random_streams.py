import zlib

import numpy as np


def rng_for(seed: int, stream: str) -> np.random.Generator:
    """
    Build the generator for one named random stream.

    Every consumer of randomness asks for its own stream, keyed by the run seed
    and the stream name. The streams come from a counter-based bit generator
    (Philox), so adding or reordering consumers never shifts another
    consumer's draws.

    Args:
        seed: Run seed (any non-negative 64-bit integer)
        stream: Stable name of the consumer, e.g. "synth/base/train"

    Returns:
        A fresh numpy Generator positioned at the start of the stream
    """
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    key = zlib.crc32(stream.encode("utf-8"))
    sequence = np.random.SeedSequence(seed, spawn_key=(key,))
    return np.random.Generator(np.random.Philox(sequence))
