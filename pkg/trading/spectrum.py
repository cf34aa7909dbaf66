"""
Per-link frequency-slot ownership.

Two integer arrays of shape (links, fs_total) hold the state of every cell:

    owner == FREE                      -> Free
    owner == v, borrower == FREE       -> Owned(v)
    owner == v, borrower == w          -> Loaned(v, w)

A cell therefore carries exactly one ownership value at any instant. The
single writer is the simulation scheduler (engine or carrier controller).
"""
from __future__ import annotations

import logging
from collections.abc import Iterable
from dataclasses import dataclass
from typing import Union

import numpy as np
import numpy.typing as npt

from trading.errors import SpectrumAuditError

logger = logging.getLogger(__name__)

FREE = -1


@dataclass(frozen=True)
class Free:
    pass


@dataclass(frozen=True)
class Owned:
    von: int


@dataclass(frozen=True)
class Loaned:
    owner: int
    borrower: int


Ownership = Union[Free, Owned, Loaned]


class SpectrumState:
    def __init__(self, link_count: int, fs_total: int, *, debug: bool = False):
        self.link_count = link_count
        self.fs_total = fs_total
        self.debug = debug
        self.owner: npt.NDArray[np.int32] = np.full((link_count, fs_total), FREE, dtype=np.int32)
        self.borrower: npt.NDArray[np.int32] = np.full((link_count, fs_total), FREE, dtype=np.int32)

    def copy(self) -> "SpectrumState":
        clone = SpectrumState(self.link_count, self.fs_total, debug=self.debug)
        clone.owner = self.owner.copy()
        clone.borrower = self.borrower.copy()
        return clone

    def ownership(self, link: int, fs: int) -> Ownership:
        owner = int(self.owner[link, fs])
        if owner == FREE:
            return Free()
        borrower = int(self.borrower[link, fs])
        if borrower == FREE:
            return Owned(owner)
        return Loaned(owner, borrower)

    def owned_by(self, von: int) -> set[tuple[int, int]]:
        links, slots = np.nonzero(self.owner == von)
        return {(int(link), int(fs)) for link, fs in zip(links, slots)}

    def assign(self, route: Iterable[int], indices: Iterable[int], von: int) -> None:
        rows = list(route)
        cols = list(indices)
        block = self.owner[np.ix_(rows, cols)]
        if (block != FREE).any():
            raise SpectrumAuditError(f"cells on links {rows} already owned, cannot assign to VON {von}")
        self.owner[np.ix_(rows, cols)] = von
        self._after_mutation()

    def release_owner(self, von: int) -> None:
        """Return every cell owned by ``von`` to Free (embedding rollback)."""
        mask = self.owner == von
        if (self.borrower[mask] != FREE).any():
            raise SpectrumAuditError(f"VON {von} still has cells on loan")
        self.owner[mask] = FREE
        self._after_mutation()

    def lend(self, link: int, fs: int, borrower: int) -> None:
        owner = int(self.owner[link, fs])
        if owner == FREE:
            raise SpectrumAuditError(f"cell ({link}, {fs}) is free and cannot be loaned")
        if self.borrower[link, fs] != FREE:
            raise SpectrumAuditError(
                f"cell ({link}, {fs}) already loaned to VON {int(self.borrower[link, fs])}"
            )
        self.borrower[link, fs] = borrower
        self._after_mutation()

    def revert(self, link: int, fs: int) -> None:
        if self.borrower[link, fs] == FREE:
            raise SpectrumAuditError(f"cell ({link}, {fs}) is not on loan")
        self.borrower[link, fs] = FREE
        self._after_mutation()

    def revert_all(self) -> int:
        count = int((self.borrower != FREE).sum())
        self.borrower.fill(FREE)
        self._after_mutation()
        return count

    def loaned_count(self) -> int:
        return int((self.borrower != FREE).sum())

    def occupancy(self, route: Iterable[int]) -> npt.NDArray[np.int32]:
        return self.owner[list(route)]

    def audit(self) -> None:
        """Raise SpectrumAuditError if any cell holds an inconsistent value."""
        if (self.owner < FREE).any() or (self.borrower < FREE).any():
            raise SpectrumAuditError("negative VON id in spectrum state")
        orphan = (self.borrower != FREE) & (self.owner == FREE)
        if orphan.any():
            link, fs = (int(v) for v in np.argwhere(orphan)[0])
            raise SpectrumAuditError(f"cell ({link}, {fs}) is loaned but has no owner")

    def _after_mutation(self) -> None:
        if self.debug:
            self.audit()
