"""
Centralized spectrum trading engine.

Per slot the engine classifies VONs into requesting clients (RC, short of
FSs and not below the forbidden threshold) and candidate clients (CC, with
surplus FSs), applies each VON's own surplus to its own deficits, then fills
RC virtual links in credit order from the offer book. Every executed fill
flips the granted cells to Loaned and moves credit between the parties.

The helpers at module level are pure and shared with the distributed
protocol in :mod:`protocol.actors`, which must reach identical outcomes.
"""
from __future__ import annotations

import logging
from collections import defaultdict
from collections.abc import Callable, Iterable, Mapping
from dataclasses import dataclass, field
from typing import Literal, Optional

from trading.credit import CreditLedger, from_units
from trading.embedding import Von, VirtualLink
from trading.spectrum import SpectrumState
from trading.topology import Topology
from trading.traffic import LinkCapacity, SlotDemand, fs_needed

logger = logging.getLogger(__name__)

TradingScope = Literal["shared_link", "same_endpoints"]


@dataclass(frozen=True)
class Contribution:
    tc: int
    grants: tuple[tuple[int, tuple[int, ...]], ...]
    credit_units: int

    @property
    def credit(self) -> float:
        return from_units(self.credit_units)

    @property
    def fs_count(self) -> int:
        return sum(len(fs) for _, fs in self.grants)


@dataclass(frozen=True)
class Trade:
    serial: int
    slot: int
    rc: int
    rc_vlink: int
    contributions: tuple[Contribution, ...]
    credit_units: int

    @property
    def credit_delta(self) -> float:
        return from_units(self.credit_units)

    def as_dict(self) -> dict:
        return {
            "serial": self.serial,
            "slot": self.slot,
            "rc": self.rc,
            "rc_vlink": self.rc_vlink,
            "credit_units": self.credit_units,
            "contributions": [
                {"tc": c.tc, "credit_units": c.credit_units, "grants": [[link, list(fs)] for link, fs in c.grants]}
                for c in self.contributions
            ],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "Trade":
        return cls(
            serial=data["serial"],
            slot=data["slot"],
            rc=data["rc"],
            rc_vlink=data["rc_vlink"],
            credit_units=data["credit_units"],
            contributions=tuple(
                Contribution(
                    tc=c["tc"],
                    credit_units=c["credit_units"],
                    grants=tuple((link, tuple(fs)) for link, fs in c["grants"]),
                )
                for c in data["contributions"]
            ),
        )


@dataclass(frozen=True)
class VlinkNeed:
    vlink_id: int
    von_id: int
    needed: int
    assigned: int

    @property
    def deficit(self) -> int:
        return max(0, self.needed - self.assigned)

    @property
    def surplus(self) -> int:
        return max(0, self.assigned - self.needed)


@dataclass(frozen=True, order=True)
class OfferCell:
    """One loanable (link, FS) cell and the virtual link lending it."""

    link: int
    fs: int
    von: int
    vlink: int
    endpoints: tuple[int, int]

    def as_list(self) -> list:
        return [self.link, self.fs, self.von, self.vlink, list(self.endpoints)]

    @classmethod
    def from_list(cls, item: list) -> "OfferCell":
        link, fs, von, vlink, endpoints = item
        return cls(link, fs, von, vlink, tuple(endpoints))


class OfferBook:
    """Loanable cells still on the market, by physical link then lender VON."""

    def __init__(self, cells: Iterable[OfferCell] = ()):
        self._by_link: dict[int, dict[tuple[int, int], OfferCell]] = defaultdict(dict)
        for cell in cells:
            self.add(cell)

    def add(self, cell: OfferCell) -> None:
        self._by_link[cell.link][(cell.fs, cell.von)] = cell

    def take(self, cell: OfferCell) -> None:
        del self._by_link[cell.link][(cell.fs, cell.von)]

    def cells_on(self, link: int) -> list[OfferCell]:
        return sorted(self._by_link.get(link, {}).values())

    def withdraw_vlink(self, vlink_id: int) -> None:
        for cells in self._by_link.values():
            for key in [key for key, cell in cells.items() if cell.vlink == vlink_id]:
                del cells[key]

    def cells(self) -> list[OfferCell]:
        return sorted(cell for cells in self._by_link.values() for cell in cells.values())

    def __len__(self) -> int:
        return sum(len(cells) for cells in self._by_link.values())


@dataclass
class Lease:
    """FSs acquired by one RC virtual link from one fill; width is uniform per link."""

    rc_vlink: int
    rc_von: int
    serial: Optional[int]
    cells: dict[int, list[OfferCell]] = field(default_factory=dict)

    @property
    def width(self) -> int:
        return min((len(cells) for cells in self.cells.values()), default=0)

    def all_cells(self) -> list[OfferCell]:
        return [cell for link in sorted(self.cells) for cell in self.cells[link]]


@dataclass
class SlotRoles:
    slot: int
    needs: dict[int, VlinkNeed]
    requesters: list[int]
    deficits: dict[int, int]
    gated: frozenset[int]
    offers: dict[int, list[OfferCell]]
    credits_at_start: dict[int, int]


@dataclass
class ReclaimOutcome:
    released: list[OfferCell]
    affected_vlinks: list[int]
    retrades: list[Trade]


# ---------------------------------------------------------------------------
# pure helpers shared with the protocol actors
# ---------------------------------------------------------------------------


def vlink_need(vlink: VirtualLink, offered_gbps: float) -> VlinkNeed:
    return VlinkNeed(vlink.id, vlink.von_id, fs_needed(offered_gbps, vlink.modulation), vlink.fs_count)


def loanable_cells(vlink: VirtualLink, surplus: int) -> list[OfferCell]:
    """Surplus cells of ``vlink``: its highest-index FSs, on every route link."""
    if surplus <= 0:
        return []
    endpoints = tuple(sorted(vlink.physical_endpoints))
    top = vlink.fs_block[-surplus:]
    return [OfferCell(link, fs, vlink.von_id, vlink.id, endpoints) for link in vlink.route for fs in top]


def scope_filter(physical_endpoints: tuple[int, int], scope: TradingScope) -> Callable[[OfferCell], bool]:
    """Which lender cells an RC link with these physical endpoints may take."""
    if scope == "same_endpoints":
        endpoints = tuple(sorted(physical_endpoints))
        return lambda cell: cell.endpoints == endpoints
    return lambda cell: True


def occupied_cells(vlink: VirtualLink, leases: Iterable[Lease]) -> dict[int, set[int]]:
    occupied = {link: set(vlink.fs_block) for link in vlink.route}
    for lease in leases:
        for link, cells in lease.cells.items():
            occupied[link].update(cell.fs for cell in cells)
    return occupied


def _contiguous_run(offered: Mapping[int, list[OfferCell]], occupied: set[int]) -> list[OfferCell]:
    run = []
    fs = max(occupied) + 1
    while fs in offered:
        run.extend(offered[fs])
        fs += 1
    fs = min(occupied) - 1
    while fs in offered:
        run.extend(offered[fs])
        fs -= 1
    return run


def eligible_offers(
    rc_vlink: VirtualLink,
    book: OfferBook,
    vcat_mode: bool,
    *,
    lender_ok: Callable[[OfferCell], bool],
    occupied: Optional[Mapping[int, set[int]]] = None,
) -> dict[int, list[OfferCell]]:
    """Candidate cells per link of the RC's route.

    Offers on links outside the route never qualify. Without sub-band VCAT
    only the offered run spectrally adjacent to the RC's occupied range
    qualifies, nearest-first upward then downward.
    """
    if occupied is None:
        occupied = {link: set(rc_vlink.fs_block) for link in rc_vlink.route}
    pools: dict[int, list[OfferCell]] = {}
    for link in rc_vlink.route:
        cells = [cell for cell in book.cells_on(link) if lender_ok(cell)]
        if vcat_mode:
            pools[link] = cells
            continue
        by_fs: dict[int, list[OfferCell]] = defaultdict(list)
        for cell in cells:
            by_fs[cell.fs].append(cell)
        pools[link] = _contiguous_run(by_fs, occupied[link])
    return pools


def order_pool(pool: list[OfferCell], credits: Mapping[int, int], vcat_mode: bool) -> list[OfferCell]:
    """Lowest cumulative credit first, then lowest VON id, then lowest FS index."""
    if not vcat_mode:
        return pool
    return sorted(pool, key=lambda cell: (credits[cell.von], cell.von, cell.fs))


def choose_grants(
    rc_vlink: VirtualLink,
    want: int,
    book: OfferBook,
    credits: Mapping[int, int],
    vcat_mode: bool,
    *,
    lender_ok: Callable[[OfferCell], bool],
    occupied: Optional[Mapping[int, set[int]]] = None,
) -> dict[int, list[OfferCell]]:
    """The cells an RC link takes: the same count t on every route link.

    t = min(want, eligible cells on the scarcest route link); empty if t is 0.
    """
    if want <= 0:
        return {}
    pools = eligible_offers(rc_vlink, book, vcat_mode, lender_ok=lender_ok, occupied=occupied)
    width = min(want, min(len(pool) for pool in pools.values()))
    if width <= 0:
        return {}
    return {link: order_pool(pool, credits, vcat_mode)[:width] for link, pool in pools.items()}


def build_trade(
    serial: int,
    slot: int,
    rc_vlink: VirtualLink,
    chosen: Mapping[int, Iterable[OfferCell]],
    topology: Topology,
) -> Optional[Trade]:
    grants: dict[int, dict[int, list[int]]] = defaultdict(lambda: defaultdict(list))
    for link, cells in chosen.items():
        for cell in cells:
            grants[cell.von][link].append(cell.fs)
    if not grants:
        return None
    contributions = []
    for tc in sorted(grants):
        per_link = tuple((link, tuple(sorted(fs))) for link, fs in sorted(grants[tc].items()))
        units = sum(len(fs) * topology.credit_weight(link) for link, fs in per_link)
        contributions.append(Contribution(tc, per_link, units))
    return Trade(
        serial=serial,
        slot=slot,
        rc=rc_vlink.von_id,
        rc_vlink=rc_vlink.id,
        contributions=tuple(contributions),
        credit_units=sum(c.credit_units for c in contributions),
    )


def narrow_lease(lease: Lease, vlink_id: int) -> list[OfferCell]:
    """Drop the cells lent by ``vlink_id`` and keep the pipe uniform.

    The width shrinks by the largest per-link loss; on links that lost fewer
    cells the most recently granted ones go as well. Returns dropped cells.
    """
    lost = {link: sum(1 for cell in cells if cell.vlink == vlink_id) for link, cells in lease.cells.items()}
    shrink = max(lost.values(), default=0)
    dropped: list[OfferCell] = []
    if shrink == 0:
        return dropped
    for link in sorted(lease.cells):
        cells = lease.cells[link]
        keep = [cell for cell in cells if cell.vlink != vlink_id]
        dropped.extend(cell for cell in cells if cell.vlink == vlink_id)
        extra = shrink - lost[link]
        if extra:
            dropped.extend(keep[len(keep) - extra:])
            keep = keep[:len(keep) - extra]
        lease.cells[link] = keep
    return dropped


def rc_order(vons: Iterable[int], credits: Mapping[int, int]) -> list[int]:
    return sorted(vons, key=lambda von: (-credits[von], von))


def classify_roles(
    vons: Iterable[Von],
    demands: SlotDemand,
    slot: int,
    ledger: CreditLedger,
    members: Optional[frozenset[int]] = None,
) -> SlotRoles:
    """Split VONs into RCs (with per-link deficits) and CCs (with surplus offers).

    Gating is evaluated here, once per slot: a VON whose cumulative credit is
    below mu is kept out of the RC set and gets no self-use. A VON can be RC
    and CC at once.
    """
    needs: dict[int, VlinkNeed] = {}
    deficits: dict[int, int] = {}
    offers: dict[int, list[OfferCell]] = {}
    requesting: set[int] = set()
    gated: set[int] = set()
    for von in vons:
        member = members is None or von.id in members
        for vlink in von.links:
            need = vlink_need(vlink, demands.at(vlink.id, slot))
            needs[vlink.id] = need
            if not member:
                continue
            if need.deficit:
                if ledger.is_forbidden(von.id):
                    gated.add(von.id)
                else:
                    requesting.add(von.id)
                    deficits[vlink.id] = need.deficit
            if need.surplus:
                offers.setdefault(von.id, []).extend(loanable_cells(vlink, need.surplus))
    credits = ledger.snapshot()
    return SlotRoles(
        slot=slot,
        needs=needs,
        requesters=rc_order(requesting, credits),
        deficits=deficits,
        gated=frozenset(gated),
        offers=offers,
        credits_at_start=credits,
    )


class TradingEngine:
    """Single-threaded trading state machine for one simulation run."""

    def __init__(
        self,
        topology: Topology,
        spectrum: SpectrumState,
        vons: Iterable[Von],
        ledger: CreditLedger,
        *,
        vcat_mode: bool = True,
        trading_scope: TradingScope = "shared_link",
        members: Optional[Iterable[int]] = None,
    ):
        self.topology = topology
        self.spectrum = spectrum
        self.vons = list(vons)
        self.ledger = ledger
        self.vcat_mode = vcat_mode
        self.trading_scope = trading_scope
        self.members = frozenset(members) if members is not None else None
        self.vlinks: dict[int, VirtualLink] = {vl.id: vl for von in self.vons for vl in von.links}
        self.last_serial = 0
        self._reset_slot_state()

    def _reset_slot_state(self) -> None:
        self.roles: Optional[SlotRoles] = None
        self.book = OfferBook()
        self.leases: dict[int, list[Lease]] = defaultdict(list)
        self.loans_out: dict[tuple[int, int], tuple[Lease, OfferCell]] = {}
        self.withdrawn: set[int] = set()
        self.trades: dict[int, Trade] = {}
        self.slot: Optional[int] = None

    # -- slot lifecycle ----------------------------------------------------

    def begin_slot(self, slot: int, demands: SlotDemand) -> SlotRoles:
        """Classify roles, open the offer book and apply self-use."""
        self._reset_slot_state()
        self.slot = slot
        self.roles = classify_roles(self.vons, demands, slot, self.ledger, self.members)
        for cells in self.roles.offers.values():
            for cell in cells:
                self.book.add(cell)
        for vlink_id in sorted(self.roles.deficits):
            self._fill(self.vlinks[vlink_id], self.roles.deficits[vlink_id], market=False)
        return self.roles

    def select_trades(self) -> list[Trade]:
        """Fill every RC virtual link from the market in credit order."""
        assert self.roles is not None, "begin_slot must run first"
        executed = []
        for rc in self.roles.requesters:
            for vlink_id in sorted(v for v in self.roles.deficits if self.vlinks[v].von_id == rc):
                trade = self._fill(self.vlinks[vlink_id], self.shortfall(vlink_id), market=True)
                if trade is not None:
                    executed.append(trade)
        return executed

    def run_slot(self, slot: int, demands: SlotDemand) -> list[Trade]:
        self.begin_slot(slot, demands)
        return self.select_trades()

    def shortfall(self, vlink_id: int) -> int:
        need = self.roles.needs[vlink_id]
        acquired = sum(lease.width for lease in self.leases[vlink_id])
        return max(0, need.deficit - acquired)

    def slot_trades(self) -> list[Trade]:
        return [self.trades[serial] for serial in sorted(self.trades)]

    def capacities(self) -> dict[int, LinkCapacity]:
        lent: dict[int, set[int]] = defaultdict(set)
        for _, cell in self.loans_out.values():
            lent[cell.vlink].add(cell.fs)
        capacities = {}
        for vlink_id, vlink in self.vlinks.items():
            acquired = sum(lease.width for lease in self.leases.get(vlink_id, ()))
            capacities[vlink_id] = LinkCapacity(vlink.fs_count - len(lent[vlink_id]), acquired)
        return capacities

    def release_trades(self) -> int:
        """Expire every loan of the slot; credits are untouched."""
        released = 0
        for leases in self.leases.values():
            for lease in leases:
                for cell in lease.all_cells():
                    self.spectrum.revert(cell.link, cell.fs)
                    released += 1
        logger.debug("slot %s: released %d loaned cells", self.slot, released)
        self._reset_slot_state()
        return released

    # -- reclaim -------------------------------------------------------------

    def reclaim(self, tc: int, vlink_id: int) -> ReclaimOutcome:
        """The lender takes back every cell it lent from ``vlink_id``.

        Credit for the returned cells is reversed, affected RC pipes narrow
        uniformly and their shortfall is re-requested from the market.
        """
        affected = sorted(
            {id(lease): lease for lease, cell in self.loans_out.values()
             if cell.vlink == vlink_id and cell.von == tc}.values(),
            key=lambda lease: (lease.rc_vlink, lease.serial or 0),
        )
        if not affected:
            return ReclaimOutcome([], [], [])

        self.withdrawn.add(vlink_id)
        self.book.withdraw_vlink(vlink_id)
        released: list[OfferCell] = []
        for lease in affected:
            dropped = narrow_lease(lease, vlink_id)
            for cell in dropped:
                self.spectrum.revert(cell.link, cell.fs)
                del self.loans_out[(cell.link, cell.fs)]
                if cell.vlink not in self.withdrawn:
                    self.book.add(cell)
                if lease.serial is not None:
                    self.ledger.transfer(cell.von, lease.rc_von, self.topology.credit_weight(cell.link))
            released.extend(dropped)
            self._rebuild_trade(lease)
            if lease.width == 0:
                self.leases[lease.rc_vlink].remove(lease)

        affected_vlinks = sorted({lease.rc_vlink for lease in affected})
        retrades = []
        credits = self.roles.credits_at_start
        refill_order = sorted(
            affected_vlinks,
            key=lambda v: (-credits[self.vlinks[v].von_id], self.vlinks[v].von_id, v),
        )
        for vlink_id_rc in refill_order:
            rc = self.vlinks[vlink_id_rc].von_id
            if rc in self.roles.gated or (self.members is not None and rc not in self.members):
                continue
            trade = self._fill(self.vlinks[vlink_id_rc], self.shortfall(vlink_id_rc), market=True)
            if trade is not None:
                retrades.append(trade)
        logger.info("VON %d reclaimed %d cells from virtual link %d", tc, len(released), vlink_id)
        return ReclaimOutcome(sorted(released), affected_vlinks, retrades)

    # -- internals -------------------------------------------------------------

    def _lender_filter(self, rc_vlink: VirtualLink, market: bool) -> Callable[[OfferCell], bool]:
        in_scope = scope_filter(rc_vlink.physical_endpoints, self.trading_scope)
        if market:
            return lambda cell: cell.von != rc_vlink.von_id and in_scope(cell)
        return lambda cell: cell.von == rc_vlink.von_id

    def _fill(self, rc_vlink: VirtualLink, want: int, *, market: bool) -> Optional[Trade]:
        chosen = choose_grants(
            rc_vlink,
            want,
            self.book,
            self.ledger.snapshot(),
            self.vcat_mode,
            lender_ok=self._lender_filter(rc_vlink, market),
            occupied=occupied_cells(rc_vlink, self.leases[rc_vlink.id]),
        )
        if not chosen:
            return None
        serial = None
        trade = None
        if market:
            self.last_serial += 1
            serial = self.last_serial
            trade = build_trade(serial, self.slot, rc_vlink, chosen, self.topology)
            for contribution in trade.contributions:
                self.ledger.transfer(rc_vlink.von_id, contribution.tc, contribution.credit_units)
            self.trades[serial] = trade
            logger.debug("trade %d: VON %d link %d <- %s", serial, trade.rc, trade.rc_vlink,
                         [c.tc for c in trade.contributions])
        lease = Lease(rc_vlink.id, rc_vlink.von_id, serial, {link: list(cells) for link, cells in chosen.items()})
        for cell in lease.all_cells():
            self.book.take(cell)
            self.spectrum.lend(cell.link, cell.fs, rc_vlink.von_id)
            self.loans_out[(cell.link, cell.fs)] = (lease, cell)
        self.leases[rc_vlink.id].append(lease)
        return trade

    def _rebuild_trade(self, lease: Lease) -> None:
        if lease.serial is None:
            return
        old = self.trades[lease.serial]
        trade = build_trade(lease.serial, old.slot, self.vlinks[lease.rc_vlink], lease.cells, self.topology)
        if trade is None:
            del self.trades[lease.serial]
        else:
            self.trades[lease.serial] = trade
