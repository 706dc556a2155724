"""Deterministic random-stream derivation.

Every random draw in the package comes from a ``numpy.random.Generator``
built from a 64-bit seed. Per-sample seeds are derived from a master seed,
a named stream and an integer index with the SplitMix64 finaliser::

    h0 = mix64(master)
    h1 = mix64(h0 ^ crc32(stream))
    seed = mix64(h1 ^ index)

where ``mix64(z)`` adds the golden-ratio increment ``0x9E3779B97F4A7C15``
and applies the two xor-shift-multiply rounds of SplitMix64. Because the
seed of sample ``k`` depends only on ``(master, stream, k)``, samples can be
generated in any order or in parallel and still be bit-identical.
"""

from __future__ import annotations

import zlib

import numpy as np

MASK64 = 0xFFFFFFFFFFFFFFFF


def mix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(master: int, stream: str, index: int = 0) -> int:
    h = mix64(int(master) & MASK64)
    h = mix64(h ^ zlib.crc32(stream.encode("utf-8")))
    return mix64(h ^ (int(index) & MASK64))


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed) & MASK64))


def stream_rng(master: int, stream: str, index: int = 0) -> np.random.Generator:
    """Generator for sample ``index`` of the named stream."""
    return make_rng(derive_seed(master, stream, index))


def draw_seed(rng: np.random.Generator) -> int:
    """Draw a fresh 63-bit child seed from ``rng``."""
    return int(rng.integers(0, 2**63 - 1))
