"""Deterministic named random streams.

Every piece of randomness in the pipeline is derived from one master seed
plus a path of names/integers, so reruns are bit-identical and independent
stages (data, model init, training) never share a stream.
"""

import zlib

import numpy as np


def _key(part):
    if isinstance(part, (int, np.integer)):
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


def seed_sequence(master, *path):
    return np.random.SeedSequence([int(master)] + [_key(p) for p in path])


def stream(master, *path):
    """Generator for the stream named by ``path`` under ``master``."""
    return np.random.default_rng(seed_sequence(master, *path))


def stream_seed(master, *path):
    """A derived 64-bit integer seed, for APIs that take plain seeds."""
    return int(seed_sequence(master, *path).generate_state(1, np.uint64)[0])
