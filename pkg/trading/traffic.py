"""Per-slot demand generation and carried/blocked accounting.

Traffic is fluid: a virtual link carries min(offered, usable capacity) and
the remainder is blocked, so blocking is fractional.
"""
from __future__ import annotations

import math
from collections.abc import Iterable, Mapping
from dataclasses import dataclass

import numpy as np

from trading.embedding import Modulation, Von, VirtualLink

MIN_DEMAND_GBPS = 10.0


@dataclass(frozen=True)
class SlotDemand:
    """Offered Gb/s per virtual link id, one value per slot."""

    offered: Mapping[int, tuple[float, ...]]
    slots: int

    def at(self, vlink_id: int, slot: int) -> float:
        return self.offered[vlink_id][slot]

    def slot_total(self, slot: int) -> float:
        return math.fsum(values[slot] for values in self.offered.values())


def generate_demands(rng: np.random.Generator, vons: Iterable[Von], slots: int) -> SlotDemand:
    """Draw offered traffic uniformly in [10, 2X - 10] for every (virtual link, slot)."""
    offered: dict[int, tuple[float, ...]] = {}
    for von in vons:
        for vlink in von.links:
            high = 2 * vlink.capacity_gbps - MIN_DEMAND_GBPS
            draws = rng.uniform(MIN_DEMAND_GBPS, high, size=slots)
            offered[vlink.id] = tuple(float(x) for x in draws)
    return SlotDemand(offered, slots)


def fs_needed(offered_gbps: float, modulation: Modulation) -> int:
    if offered_gbps < 0:
        raise ValueError("offered traffic must be nonnegative")
    return math.ceil(offered_gbps / modulation.fs_capacity_gbps)


@dataclass(frozen=True)
class LinkCapacity:
    """FSs usable by one virtual link in a slot."""

    retained: int
    acquired: int = 0


@dataclass(frozen=True)
class LinkSlotResult:
    vlink_id: int
    von_id: int
    slot: int
    offered_gbps: float
    carried_gbps: float
    blocked_gbps: float
    own_fs_used: int
    traded_fs_used: int


@dataclass(frozen=True)
class SlotResult:
    slot: int
    rows: tuple[LinkSlotResult, ...]

    @property
    def offered_gbps(self) -> float:
        return math.fsum(row.offered_gbps for row in self.rows)

    @property
    def carried_gbps(self) -> float:
        return math.fsum(row.carried_gbps for row in self.rows)

    @property
    def blocked_gbps(self) -> float:
        return math.fsum(row.blocked_gbps for row in self.rows)


def settle_link(vlink: VirtualLink, offered: float, capacity: LinkCapacity, slot: int) -> LinkSlotResult:
    fs_capacity = vlink.modulation.fs_capacity_gbps
    usable = capacity.retained + capacity.acquired
    carried = min(offered, usable * fs_capacity)
    needed = fs_needed(offered, vlink.modulation)
    own_used = min(capacity.retained, needed)
    traded_used = min(capacity.acquired, needed - own_used)
    return LinkSlotResult(
        vlink_id=vlink.id,
        von_id=vlink.von_id,
        slot=slot,
        offered_gbps=offered,
        carried_gbps=carried,
        blocked_gbps=offered - carried,
        own_fs_used=own_used,
        traded_fs_used=traded_used,
    )


def settle_slot(
    slot: int,
    vons: Iterable[Von],
    demands: SlotDemand,
    capacities: Mapping[int, LinkCapacity] | None = None,
) -> SlotResult:
    """Account carried and blocked traffic once the slot's trading is done.

    ``capacities`` maps virtual link id to its usable FSs; links missing from
    it use their full assignment and nothing acquired (non-ST operation).
    """
    capacities = capacities or {}
    rows = []
    for von in vons:
        for vlink in von.links:
            capacity = capacities.get(vlink.id, LinkCapacity(vlink.fs_count))
            rows.append(settle_link(vlink, demands.at(vlink.id, slot), capacity, slot))
    return SlotResult(slot, tuple(rows))
