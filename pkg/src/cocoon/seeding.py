"""Named random streams derived from one master seed."""

import zlib

import numpy as np


def stream_seed(master_seed, name):
    """Integer seed for the stream ``name`` under ``master_seed``.

    The name is hashed with CRC-32 and the pair ``(master_seed, crc)`` is fed
    to ``numpy.random.SeedSequence``; the first 32-bit word of its state is the
    stream seed.
    """
    ss = np.random.SeedSequence([int(master_seed), zlib.crc32(str(name).encode())])
    return int(ss.generate_state(1)[0])


def stream_rng(master_seed, name):
    return np.random.default_rng(stream_seed(master_seed, name))
