"""
Timing utilities for balance-bench.
"""

import logging
import math
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Dict, Iterator

logger = logging.getLogger(__name__)


class Timer:
    """Wall-clock timer backed by perf_counter."""

    def __init__(self) -> None:
        self.start_time: float = time.perf_counter()
        self.end_time: float = 0.0

    def stop(self) -> float:
        self.end_time = time.perf_counter()
        return self.elapsed

    @property
    def elapsed(self) -> float:
        end_time = self.end_time or time.perf_counter()
        return end_time - self.start_time


@dataclass
class _Aggregate:
    count: int = 0
    total: float = 0.0
    shortest: float = math.inf
    longest: float = 0.0

    def add(self, duration: float) -> None:
        self.count += 1
        self.total += duration
        self.shortest = min(self.shortest, duration)
        self.longest = max(self.longest, duration)


class PerformanceTracker:
    """Running duration aggregates per operation; safe to share across threads."""

    def __init__(self) -> None:
        self.metrics: Dict[str, _Aggregate] = {}
        self._lock = threading.Lock()

    def record(self, operation: str, duration: float) -> None:
        with self._lock:
            self.metrics.setdefault(operation, _Aggregate()).add(duration)

    def get_stats(self, operation: str) -> Dict[str, float]:
        with self._lock:
            aggregate = self.metrics.get(operation)
            if aggregate is None:
                return {}
            return {
                'count': aggregate.count,
                'total': aggregate.total,
                'average': aggregate.total / aggregate.count,
                'min': aggregate.shortest,
                'max': aggregate.longest
            }

    def get_all_stats(self) -> Dict[str, Dict[str, float]]:
        with self._lock:
            operations = list(self.metrics)
        return {op: self.get_stats(op) for op in operations}

    def clear(self) -> None:
        with self._lock:
            self.metrics.clear()


performance_tracker = PerformanceTracker()


@contextmanager
def time_operation(operation_name: str, track: bool = True) -> Iterator[Timer]:
    """
    Time a block, log it at DEBUG and optionally record it in the tracker.

    Args:
        operation_name: Name of the operation being timed
        track: Whether to record the duration in ``performance_tracker``

    Yields:
        Timer instance
    """
    timer = Timer()
    try:
        yield timer
    finally:
        elapsed = timer.stop()
        if track:
            performance_tracker.record(operation_name, elapsed)
        logger.debug(f"{operation_name} completed in {elapsed:.3f} seconds")
