"""Deterministic random-stream derivation.

Every stochastic ingredient of an experiment (the disorder of realisation d,
the two replica chains, the limiting-form z draws, the projection matrices)
gets its own stream keyed by (master seed, disorder index, role).  Keys come
from a keyed BLAKE2b hash, so streams never depend on execution order or on
how disorders are spread across workers.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

ROLE_DISORDER = 0
ROLE_REPLICA1 = 1
ROLE_REPLICA2 = 2
ROLE_Z = 3
ROLE_THETA = 4
ROLE_CAVITY1 = 5   # replicas of the truncated system (sampled cavity fields)
ROLE_CAVITY2 = 6
ROLE_GRID = 7      # per-grid-point sub-seeds of a sweep

ROLE_NAMES = {ROLE_DISORDER: "disorder", ROLE_REPLICA1: "replica1", ROLE_REPLICA2: "replica2",
              ROLE_Z: "z", ROLE_THETA: "theta", ROLE_CAVITY1: "cavity1",
              ROLE_CAVITY2: "cavity2", ROLE_GRID: "grid"}

_KEY = b"glasslab/seed-stream/v1"
_U64 = 1 << 64


def _check_u64(name, v):
    v = int(v)
    if not 0 <= v < _U64:
        raise ValueError(f"{name} must fit in an unsigned 64-bit integer, got {v}")
    return v


def seed_stream(master_seed: int, disorder_index: int, stream_role: int) -> bytes:
    """256-bit stream key for the triple (master_seed, disorder_index, stream_role)."""
    payload = struct.pack("<QQQ", _check_u64("master_seed", master_seed),
                          _check_u64("disorder_index", disorder_index),
                          _check_u64("stream_role", stream_role))
    return hashlib.blake2b(payload, digest_size=32, key=_KEY).digest()


def key_to_int(key: bytes) -> int:
    return int.from_bytes(key, "little")


def generator(master_seed: int, disorder_index: int, stream_role: int) -> np.random.Generator:
    key = seed_stream(master_seed, disorder_index, stream_role)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key_to_int(key))))


def disorder_seed(master_seed: int, disorder_index: int) -> int:
    """64-bit seed handed to :func:`glasslab.models.sample_disorder`."""
    return int.from_bytes(seed_stream(master_seed, disorder_index, ROLE_DISORDER)[:8], "little")


def sub_seed(master_seed: int, label: int) -> int:
    """Independent master seed for one point (e.g. one N) of a sweep."""
    return int.from_bytes(seed_stream(master_seed, label, ROLE_GRID)[:8], "little")


@dataclass(frozen=True)
class Streams:
    """The per-disorder bundle of random streams."""

    master_seed: int
    index: int

    def generator(self, role: int) -> np.random.Generator:
        return generator(self.master_seed, self.index, role)

    @property
    def disorder_seed(self) -> int:
        return disorder_seed(self.master_seed, self.index)
