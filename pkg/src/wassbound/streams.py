"""Per-chain random streams keyed on (master_seed, chain, slot).

Every chain owns one Philox generator per draw slot. Within a slot, draws are
consumed strictly in step order, so the value a chain sees at step t does not
depend on how steps are chunked or how chains are grouped across workers.
Couplings express sharing by having both sides read the same slot.

Per-step consumption, in this order:
    noise_*  d standard normals
    unif_*   1 uniform on [0, 1)   (Metropolis-adjusted kernels only)
    batch_*  n uniforms, ranked to pick a minibatch (SGLD only)
"""

from __future__ import annotations

import zlib

import numpy as np

SLOTS = {
    "init_a": 0,
    "init_b": 1,
    "noise_a": 2,
    "noise_b": 3,
    "unif_a": 4,
    "unif_b": 5,
    "batch_a": 6,
    "batch_b": 7,
    "noise_c": 8,
    "unif_c": 9,
    "batch_c": 10,
}


def _key(k) -> int:
    if isinstance(k, (int, np.integer)):
        return int(k)
    return zlib.crc32(str(k).encode())


def derive_seed(master_seed: int, *keys) -> int:
    """Child 64-bit seed for a named sub-experiment."""
    ss = np.random.SeedSequence(master_seed, spawn_key=tuple(_key(k) for k in keys))
    return int(ss.generate_state(1, np.uint64)[0])


def slot_generator(master_seed: int, chain: int, slot: str) -> np.random.Generator:
    ss = np.random.SeedSequence(master_seed, spawn_key=(int(chain), SLOTS[slot]))
    return np.random.Generator(np.random.Philox(ss))


class ChainStreams:
    """Lazily created slot generators for a contiguous group of chains."""

    def __init__(self, master_seed: int, chains):
        self.master_seed = int(master_seed)
        self.chains = [int(c) for c in chains]
        self._gens: dict[str, list[np.random.Generator]] = {}

    def __len__(self):
        return len(self.chains)

    def gens(self, slot: str):
        if slot not in self._gens:
            self._gens[slot] = [slot_generator(self.master_seed, c, slot) for c in self.chains]
        return self._gens[slot]

    def normals(self, slot: str, steps: int, d: int) -> np.ndarray:
        """Array of shape (steps, chains, d)."""
        return np.stack([g.standard_normal((steps, d)) for g in self.gens(slot)], axis=1)

    def uniforms(self, slot: str, steps: int) -> np.ndarray:
        """Array of shape (steps, chains)."""
        return np.stack([g.random(steps) for g in self.gens(slot)], axis=1)

    def batch_uniforms(self, slot: str, steps: int, n: int) -> np.ndarray:
        """Per-observation ranking keys, shape (steps, chains, n); see `rank_batch`."""
        return np.stack([g.random((steps, n)) for g in self.gens(slot)], axis=1)


def rank_batch(keys: np.ndarray, b: int) -> np.ndarray:
    """Sorted indices of the b smallest keys along the last axis.

    Uniform keys make this a uniform draw without replacement. Kernels that
    read the same keys with different b get nested minibatches.
    """
    n = keys.shape[-1]
    if b >= n:
        return np.broadcast_to(np.arange(n), keys.shape[:-1] + (n,))
    return np.sort(np.argpartition(keys, b - 1, axis=-1)[..., :b], axis=-1)
