"""Runtime FLOP tally.

Backend ops report the work they actually perform, computed from the arrays they
were handed. The tally is only active inside ``count_flops()``; the analytic model in
``neuroevo.flops`` is checked against it.
"""

from __future__ import annotations

import contextlib
import contextvars
from collections import Counter

_active: contextvars.ContextVar[Counter | None] = contextvars.ContextVar("flop_tally", default=None)


def tally(kind: str, n: int) -> None:
    counter = _active.get()
    if counter is not None:
        counter[kind] += int(n)


@contextlib.contextmanager
def count_flops():
    counter: Counter = Counter()
    token = _active.set(counter)
    try:
        yield counter
    finally:
        _active.reset(token)
