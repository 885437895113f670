"""Seeded RNG streams so every stochastic component draws from its own generator."""

import zlib

import numpy as np


def _key_to_int(key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    return int(key)


def make_rng(seed: int, *keys) -> np.random.Generator:
    """Derive an independent generator for (seed, *keys).

    Keys may be ints or short strings; strings are crc32-folded so stream
    names stay readable at call sites. Same arguments -> bit-identical stream.
    """
    entropy = (int(seed),) + tuple(_key_to_int(k) for k in keys)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def rng_state(rng: np.random.Generator) -> dict:
    """JSON-serializable snapshot of a PCG64 generator."""
    return rng.bit_generator.state


def restore_rng(state: dict) -> np.random.Generator:
    gen = np.random.Generator(np.random.PCG64())
    gen.bit_generator.state = state
    return gen
