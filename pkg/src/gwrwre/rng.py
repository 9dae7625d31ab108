"""Counter-based keyed random streams.

Every random quantity in the package is drawn from a Philox stream whose key
is a hash of ``(root seed, stream tag, address)``.  Realization order therefore
never changes what gets drawn: a vertex of a lazily expanded tree sees the same
numbers whether it is expanded first or last, and replica ``i`` of a batch sees
the same numbers regardless of how replicas are split across workers.
"""

from __future__ import annotations

import hashlib
import math
import struct
from typing import Sequence

import numpy as np

# Stream tags.  Kept as small integers so keys are stable across releases.
TREE = 1
ENV = 2
WALK = 3
REPLICA = 4
PROBE = 5


def stream_key(seed: int, tag: int, address: Sequence[int] = ()) -> int:
    """128-bit Philox key for ``(seed, tag, address)``.

    The address length is hashed in front of the entries so that ``(1, 2)`` and
    ``(1, 2, 0)`` never collide.
    """
    h = hashlib.blake2b(digest_size=16)
    h.update(struct.pack("<qqq", int(seed), int(tag), len(address)))
    if address:
        h.update(struct.pack(f"<{len(address)}q", *address))
    return int.from_bytes(h.digest(), "little")


def keyed_rng(seed: int, tag: int, address: Sequence[int] = ()) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=stream_key(seed, tag, address)))


ROOT_DIGEST = hashlib.blake2b(b"root", digest_size=16).digest()


def child_digest(parent: bytes, index: int) -> bytes:
    """Digest of a tree address, chained from the parent's digest.

    Chaining keeps the cost per vertex constant however deep the vertex is,
    and the digest still depends only on the address.
    """
    return hashlib.blake2b(parent + struct.pack("<q", int(index)), digest_size=16).digest()


def address_digest(address: Sequence[int]) -> bytes:
    d = ROOT_DIGEST
    for i in address:
        d = child_digest(d, i)
    return d


_BLOCK = struct.Struct("<q")
_WORDS = struct.Struct("<8Q")
_TWO_M53 = 1.0 / 9007199254740992.0


class HashStream:
    """Uniform stream from a keyed hash in counter mode, cheap to create.

    ``random`` is served from 64-byte BLAKE2b blocks (eight 53-bit uniforms
    per block).  Any other generator method is delegated to a Philox
    generator on the same key, built on first use.
    """

    __slots__ = ("_key", "_block", "_buf", "_pos", "_gen")

    def __init__(self, key: bytes):
        self._key = key
        self._block = 0
        self._buf = None
        self._pos = 8

    def _next_block(self) -> list:
        raw = hashlib.blake2b(_BLOCK.pack(self._block), digest_size=64, key=self._key).digest()
        self._block += 1
        return [(x >> 11) * _TWO_M53 for x in _WORDS.unpack(raw)]

    def random(self, size=None):
        if size is None:
            if self._pos == 8:
                self._buf = self._next_block()
                self._pos = 0
            self._pos += 1
            return self._buf[self._pos - 1]
        shape = (int(size),) if isinstance(size, (int, np.integer)) else tuple(size)
        n = math.prod(shape)
        out = []
        while len(out) < n:
            if self._pos == 8:
                self._buf = self._next_block()
                self._pos = 0
            m = min(8 - self._pos, n - len(out))
            out.extend(self._buf[self._pos:self._pos + m])
            self._pos += m
        return np.array(out, dtype=float).reshape(shape)

    def __getattr__(self, name):
        if name.startswith("__"):
            raise AttributeError(name)
        try:
            gen = object.__getattribute__(self, "_gen")
        except AttributeError:
            gen = np.random.Generator(np.random.Philox(key=int.from_bytes(self._key, "little")))
            self._gen = gen
        return getattr(gen, name)


def vertex_rng(seed: int, tag: int, digest: bytes) -> HashStream:
    """Stream for the vertex whose address digest is ``digest``."""
    h = hashlib.blake2b(digest_size=16)
    h.update(struct.pack("<qq", int(seed), int(tag)))
    h.update(digest)
    return HashStream(h.digest())


def replica_rng(seed: int, replica: int, tag: int = REPLICA) -> np.random.Generator:
    """Independent stream for one Monte Carlo replica."""
    return keyed_rng(seed, tag, (replica,))


def replica_seed(seed: int, replica: int) -> int:
    """Derived 63-bit seed for objects (trees, environments) owned by a replica."""
    return stream_key(seed, REPLICA, (replica, 0)) >> 65


def as_generator(rng: np.random.Generator | int | None) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)
