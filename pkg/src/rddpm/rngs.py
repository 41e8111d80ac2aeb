"""Deterministic random streams derived from one master seed."""

import zlib

import numpy as np


def role_rng(seed: int, role: str, index: int = 0) -> np.random.Generator:
    """Generator for ``role`` (and an optional integer sub-index) under ``seed``.

    Streams for different roles are independent; the same triple always gives
    the same stream.
    """
    tag = zlib.crc32(role.encode("utf-8"))
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(tag, int(index)))
    return np.random.default_rng(ss)
