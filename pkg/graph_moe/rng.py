from typing import Tuple

import numpy as np


class RngState:
    """
    Counter-based random stream. Each draw gets its own Philox generator keyed on (seed, counter), so the values
    of a draw depend only on the seed and how many draws came before it.
    """

    def __init__(self, seed: int, counter: int = 0) -> None:
        if seed < 0:
            raise ValueError(f"Seed must be non-negative, got {seed}")
        self.seed = seed
        self.counter = counter

    def _next_generator(self) -> np.random.Generator:
        seed_seq = np.random.SeedSequence([self.seed, self.counter])
        self.counter += 1
        return np.random.Generator(np.random.Philox(seed_seq))

    def uniform(self, shape: Tuple[int, ...]) -> np.ndarray:
        return self._next_generator().random(shape)

    def normal(self, shape: Tuple[int, ...]) -> np.ndarray:
        return self._next_generator().standard_normal(shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._next_generator().permutation(n)

    def integers(self, low: int, high: int, size: int) -> np.ndarray:
        return self._next_generator().integers(low, high, size=size)

    def fork(self, tag: int) -> "RngState":
        """Independent stream derived from this one, without advancing it."""
        child_seed = int(np.random.SeedSequence([self.seed, self.counter, tag]).generate_state(1, np.uint32)[0])
        return RngState(child_seed)

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}(seed={self.seed}, counter={self.counter})"
