import asyncio
import re
from typing import Awaitable, List, TypeVar

import numpy as np
from tqdm import tqdm

T = TypeVar("T")
SEED_RANGE_PATTERN = re.compile(r"^(\d+)\.\.(\d+)$")


async def tqdm_gather(awaitables: List[Awaitable[T]], **kwargs) -> List[T]:
    """Gathers awaitables with a progress bar, returning results in the order given."""
    async def wrap_awaitable(number: int, awaitable: Awaitable[T]):
        return number, await awaitable

    numbered_awaitables = [wrap_awaitable(idx, awaitable) for idx, awaitable in enumerate(awaitables)]

    numbered_results = [
        await f for f in tqdm(asyncio.as_completed(numbered_awaitables), total=len(awaitables), **kwargs)
    ]

    return [result for _, result in sorted(numbered_results, key=lambda pair: pair[0])]


def parse_seeds(text: str) -> List[int]:
    """Inclusive range "0..9" or comma list "1,4,7"."""
    text = text.strip()
    match = SEED_RANGE_PATTERN.match(text)
    if match:
        start, end = int(match.group(1)), int(match.group(2))
        if end < start:
            raise ValueError(f"Seed range {text} runs backwards")
        return list(range(start, end + 1))
    seeds = [int(part) for part in text.split(",") if part.strip()]
    if not seeds or any(seed < 0 for seed in seeds):
        raise ValueError(f"Seeds must be non-negative integers, got {text!r}")
    if len(set(seeds)) != len(seeds):
        raise ValueError(f"Seed list {text!r} repeats a seed")
    return seeds


def population_std(values: List[float]) -> float:
    if not values:
        return 0.0
    return float(np.std(values))
