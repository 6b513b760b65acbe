"""Seeded randomness and parameter initialisers.

All generators are numpy ``PCG64`` streams, which are specified bit-for-bit
and therefore identical across platforms. Sub-seeds for independent
subsystems are derived by hashing the root seed with a label (BLAKE2b, first
8 bytes little-endian), so a single integer reproduces a whole run.
"""

from __future__ import annotations

import hashlib

import numpy as np

from ..errors import ParameterError


def make_rng(seed: int | np.random.Generator) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(int(seed) & (2**64 - 1)))


def derive_seed(seed: int, *labels) -> int:
    h = hashlib.blake2b(digest_size=8)
    h.update(int(seed).to_bytes(8, "little", signed=False) if seed >= 0
             else int(seed).to_bytes(8, "little", signed=True))
    for label in labels:
        h.update(b"\x00" + str(label).encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


def xavier_std(fan_in: int, fan_out: int) -> float:
    if fan_in < 1 or fan_out < 1:
        raise ParameterError(f"xavier init needs positive fans, got fan_in={fan_in}, fan_out={fan_out}")
    return float(np.sqrt(2.0 / (fan_in + fan_out)))


def xavier_normal_init(fan_in: int, fan_out: int, rng, dtype=np.float64, shape=None) -> np.ndarray:
    """Normal(0, 2 / (fan_in + fan_out)) samples, shaped ``(fan_in, fan_out)`` by default."""
    std = xavier_std(fan_in, fan_out)
    rng = make_rng(rng)
    shape = (fan_in, fan_out) if shape is None else shape
    return (rng.standard_normal(shape) * std).astype(dtype)
