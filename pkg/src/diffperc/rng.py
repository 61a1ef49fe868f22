"""Seeded, restorable random streams with a draw counter.

The counter exists so the training harness can audit that no noise is
sampled on the perception path (feature extraction runs at timestep 0).
"""

import zlib

import numpy as np

ALGORITHM = "pcg64"


class Rng:
    def __init__(self, seed: int):
        self.seed = int(seed)
        self.algorithm = ALGORITHM
        self._gen = np.random.Generator(np.random.PCG64(self.seed))
        self.draws = 0

    def normal(self, shape) -> np.ndarray:
        self.draws += 1
        return self._gen.standard_normal(size=shape, dtype=np.float32)

    def uniform(self, low, high, shape) -> np.ndarray:
        self.draws += 1
        return self._gen.uniform(low, high, size=shape).astype(np.float32)

    def integers(self, low, high, size=None):
        self.draws += 1
        return self._gen.integers(low, high, size=size)

    def permutation(self, n) -> np.ndarray:
        self.draws += 1
        return self._gen.permutation(n)

    def choice(self, options, size=None):
        self.draws += 1
        return self._gen.choice(options, size=size)

    def state(self) -> dict:
        return {
            "seed": self.seed,
            "algorithm": self.algorithm,
            "draws": self.draws,
            "bit_generator": self._gen.bit_generator.state,
        }

    def set_state(self, state: dict):
        self.seed = int(state["seed"])
        self.draws = int(state["draws"])
        self._gen.bit_generator.state = state["bit_generator"]


def spawn(seed: int, count: int) -> list[Rng]:
    """Derive independent streams from one master seed (init/data/noise)."""
    children = np.random.SeedSequence(seed).spawn(count)
    return [Rng(int(c.generate_state(1)[0])) for c in children]


def step_rng(seed: int, tag: str, step: int) -> Rng:
    """Stream that is a pure function of (seed, tag, step).

    Training draws (batch order, augmentation, diffusion noise) come from
    these, so resuming at any step reproduces the exact remaining sequence
    without serializing iterator state.
    """
    entropy = [int(seed) & 0xFFFFFFFF, zlib.crc32(tag.encode()), int(step)]
    return Rng(int(np.random.SeedSequence(entropy).generate_state(1)[0]))
