"""Counter-based random state shared by every stochastic component."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


def derive_seed(seed: int, *keys) -> int:
    """Stable 64-bit seed from a base seed and arbitrary keys (e.g. an item id)."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(seed) & _MASK64).encode())
    for k in keys:
        h.update(b"\x00")
        h.update(str(k).encode())
    return int.from_bytes(h.digest(), "little")


@dataclass
class RngState:
    """A (seed, counter) pair; every draw consumes one counter value.

    Two states with equal seed and counter produce identical draws, which is
    what makes checkpoint resume exact.
    """

    seed: int
    counter: int = 0

    def __post_init__(self) -> None:
        self.seed = int(self.seed) & _MASK64
        self.counter = int(self.counter) & _MASK64

    def generator(self) -> np.random.Generator:
        """A fresh numpy Generator for the current counter; advances the counter."""
        g = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, self.counter])))
        self.counter = (self.counter + 1) & _MASK64
        return g

    def child(self, *keys) -> "RngState":
        """Independent stream keyed by ``keys``; does not advance this state."""
        return RngState(derive_seed(self.seed, *keys), 0)

    def copy(self) -> "RngState":
        return RngState(self.seed, self.counter)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "counter": self.counter}

    @classmethod
    def from_dict(cls, d: dict) -> "RngState":
        return cls(int(d["seed"]), int(d["counter"]))
