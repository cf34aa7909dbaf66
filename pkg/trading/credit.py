"""Cumulative credit accounting with a forbidden threshold.

Credits are held as integers in units of 1e-6 credit so that every trade,
refund and release keeps the community total at exactly zero.
"""
from __future__ import annotations

import logging
from collections.abc import Iterable, Mapping
from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from trading.topology import Topology

logger = logging.getLogger(__name__)

CREDIT_SCALE = 1_000_000

Grants = Iterable[tuple[int, Iterable[int]]]


def to_units(credit: float) -> int:
    return round(credit * CREDIT_SCALE)


def from_units(units: int) -> float:
    return units / CREDIT_SCALE


def credit_units_of(grants: Grants, topology: "Topology") -> int:
    return sum(len(tuple(fs)) * topology.credit_weight(link) for link, fs in grants)


def credit_of(grants: Grants, topology: "Topology") -> float:
    """Credit earned by one contributor: sum of S_i * l_i over its granted links.

    ``grants`` is an iterable of ``(link id, FS indices)`` pairs. Raises
    ``TopologyError`` for an unknown link.
    """
    return from_units(credit_units_of(grants, topology))


class CreditLedger:
    """Zero-sum cumulative credit per VON plus the forbidden threshold mu."""

    def __init__(self, von_ids: Iterable[int], threshold_mu: float):
        self.threshold_mu = threshold_mu
        self.mu_units = to_units(threshold_mu)
        self._balances: dict[int, int] = {von: 0 for von in von_ids}

    def units(self, von: int) -> int:
        return self._balances[von]

    def credit(self, von: int) -> float:
        return from_units(self._balances[von])

    def is_forbidden(self, von: int) -> bool:
        # strict: a VON sitting exactly on the threshold may still request
        return self._balances[von] < self.mu_units

    def transfer(self, payer: int, payee: int, units: int) -> None:
        if payer == payee or units == 0:
            return
        self._balances[payer] -= units
        self._balances[payee] += units
        logger.debug("credit %d units: VON %d -> VON %d", units, payer, payee)

    def set_units(self, von: int, units: int) -> None:
        """Overwrite one balance; scripted scenarios only, breaks zero-sum unless paired."""
        self._balances[von] = units

    def total_units(self) -> int:
        return sum(self._balances.values())

    def snapshot(self) -> dict[int, int]:
        return dict(self._balances)

    def credits(self) -> dict[int, float]:
        return {von: from_units(units) for von, units in self._balances.items()}

    @classmethod
    def from_snapshot(cls, balances: Mapping[int, int], threshold_mu: float) -> "CreditLedger":
        ledger = cls(balances.keys(), threshold_mu)
        ledger._balances.update(balances)
        return ledger
