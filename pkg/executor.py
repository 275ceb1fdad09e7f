"""
Run blocking per-case work concurrently with a bound on parallelism.
"""
import asyncio
import logging
from typing import Any, Callable, List, Optional, Sequence, TypeVar

T = TypeVar("T")
R = TypeVar("R")

logger = logging.getLogger(__name__)


class CaseExecutor:
    """Execute per-case functions in worker threads, at most ``max_concurrency`` at a time."""

    def __init__(self, max_concurrency: int = 4):
        if max_concurrency < 1:
            raise ValueError(f"max_concurrency must be at least 1, got {max_concurrency}")
        self.max_concurrency = max_concurrency
        self._sem: Optional[asyncio.Semaphore] = None

    async def run_case(self, fn: Callable[..., R], *args: Any) -> R:
        """Run one blocking call in a thread once a slot is free."""
        if self._sem is None:
            self._sem = asyncio.Semaphore(self.max_concurrency)
        async with self._sem:
            return await asyncio.to_thread(fn, *args)

    async def map_cases_async(self, fn: Callable[[T], R], items: Sequence[T]) -> List[R]:
        """Apply ``fn`` to every item; results come back in input order."""
        tasks = [self.run_case(fn, item) for item in items]
        return list(await asyncio.gather(*tasks))

    def map_cases(self, fn: Callable[[T], R], items: Sequence[T]) -> List[R]:
        """Synchronous entry point for callers outside an event loop."""
        self._sem = None
        try:
            return asyncio.run(self.map_cases_async(fn, items))
        finally:
            self._sem = None


def map_cases(fn: Callable[[T], R], items: Sequence[T], workers: int = 1) -> List[R]:
    """Ordered map over cases; a single worker runs inline without an event loop."""
    if workers <= 1:
        return [fn(item) for item in items]
    logger.debug("mapping %d cases over %d workers", len(items), workers)
    return CaseExecutor(max_concurrency=workers).map_cases(fn, items)

