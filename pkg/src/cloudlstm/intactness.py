"""Point-count bookkeeping: every operator must hand back as many points as it got."""
from __future__ import annotations

from collections import Counter

_checks: Counter = Counter()
_violations: Counter = Counter()


class InformationLossError(AssertionError):
    pass


def check(n_in: int, n_out: int, where: str) -> None:
    _checks[where] += 1
    if n_in != n_out:
        _violations[where] += 1
        raise InformationLossError(f"{where}: {n_in} points in, {n_out} out")


def totals() -> tuple[int, int]:
    return sum(_checks.values()), sum(_violations.values())


def by_site() -> dict[str, tuple[int, int]]:
    return {k: (_checks[k], _violations[k]) for k in _checks}


def reset() -> None:
    _checks.clear()
    _violations.clear()
