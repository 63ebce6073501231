"""Per-process operation counters used to audit ablation runs."""

from collections import Counter
from contextlib import contextmanager
from typing import Iterator

SIMILARITY = "similarity"
PROTOTYPE = "prototype"
INJECTION = "injection"

counters: Counter[str] = Counter()


def count(name: str) -> None:
    counters[name] += 1


def reset() -> None:
    counters.clear()


def snapshot() -> dict[str, int]:
    return {name: counters[name] for name in (SIMILARITY, PROTOTYPE, INJECTION)}


@contextmanager
def measure() -> Iterator[dict[str, int]]:
    """Yield a dict that is filled with the counts accumulated inside the block."""
    before = snapshot()
    delta: dict[str, int] = {}
    try:
        yield delta
    finally:
        after = snapshot()
        delta.update({name: after[name] - before[name] for name in after})
