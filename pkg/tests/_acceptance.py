"""Bookkeeping for the acceptance suite: one PASS/FAIL line per criterion."""

import time
from contextlib import contextmanager

RESULTS: dict[int, str] = {}


@contextmanager
def criterion(number: int, title: str, limit_s: float | None):
    """Time the body; record FAIL if it raises or overruns ``limit_s``.

    The body may append notes to the yielded list; they are shown after the verdict.
    """
    notes: list[str] = []
    start = time.perf_counter()
    try:
        yield notes
    except BaseException as exc:
        elapsed = time.perf_counter() - start
        RESULTS[number] = f"FAIL  criterion {number:>2}: {title} ({elapsed:.2f}s) -- {type(exc).__name__}: {exc}"
        raise
    elapsed = time.perf_counter() - start
    over = limit_s is not None and elapsed >= limit_s
    verdict = "FAIL" if over else "PASS"
    limit = f" < {limit_s:.1f}s" if limit_s is not None else ""
    extra = f" -- {'; '.join(notes)}" if notes else ""
    RESULTS[number] = f"{verdict}  criterion {number:>2}: {title} ({elapsed:.2f}s{limit}){extra}"
    assert not over, f"criterion {number} took {elapsed:.2f}s, limit {limit_s}s"
