"""Counter-based random streams.

Every random draw in the package comes from :func:`stream`, which builds a
``numpy.random.Generator`` on the Philox-4x64 counter-based bit generator.  The
128-bit Philox key is ``(seed, stream_id)`` where ``stream_id`` is the first 8
bytes (little endian) of the BLAKE2b digest of the stream's name.  Streams with
different names are independent, a stream never depends on how many numbers
another stream consumed, and the output is identical on every platform that
runs the same numpy major version.
"""
from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def stream_id(*names) -> int:
    tag = "/".join(str(n) for n in names).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(tag, digest_size=8).digest(), "little")


def stream(seed: int, *names) -> np.random.Generator:
    """Independent generator for ``(seed, names...)``."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    key = (int(seed) & _MASK64) | (stream_id(*names) << 64)
    return np.random.Generator(np.random.Philox(key=key))


def standard_normal(seed: int, shape, *names) -> np.ndarray:
    return stream(seed, *names).standard_normal(shape)
