"""
Distributed spectrum trading among VON client controllers.

Every VON runs a :class:`ClientActor` holding only its own spectrum view, a
replica of the credit ledger, the trade log and a chain replica. Actors talk
exclusively through the :class:`~protocol.bus.SimBus`:

    RC  -> all   TradeRequest   (one per deficit virtual link)
    CC  -> RC    TradeOffer     (own loanable cells on the route + own credit)
    RC  -> TC    TradeCommit    (the cells chosen from that TC)
    TC  -> all   TradeAck       (the full trade; every replica applies credit)

Sessions run one at a time in RC order. The carrier controller applies
every commit and release to the physical spectrum.
"""
import logging
from collections import defaultdict
from collections.abc import Iterable
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

from protocol.bus import Message, MessageKind, SimBus
from trading.chain import (
    Block,
    Chain,
    CreatorMetric,
    block_bytes,
    build_slot_block,
    decode_block,
    select_creator,
    transactions_for,
    verify_block,
)
from trading.credit import CreditLedger
from trading.embedding import VirtualLink, Von
from trading.engine import (
    Lease,
    OfferBook,
    OfferCell,
    ReclaimOutcome,
    Trade,
    TradingScope,
    VlinkNeed,
    build_trade,
    choose_grants,
    loanable_cells,
    narrow_lease,
    occupied_cells,
    rc_order,
    scope_filter,
    vlink_need,
)
from trading.errors import ChainFormatError, ProtocolViolation
from trading.spectrum import SpectrumState
from trading.topology import Topology
from trading.traffic import LinkCapacity, SlotDemand

logger = logging.getLogger(__name__)


class Phase(str, Enum):
    IDLE = "Idle"
    REQUESTING = "Requesting"
    OFFERING = "Offering"
    COMMITTING = "Committing"


@dataclass
class _Session:
    vlink: VirtualLink
    want: int
    offers: dict[int, tuple[int, list[OfferCell]]] = field(default_factory=dict)


class ClientActor:
    def __init__(
        self,
        von: Von,
        bus: SimBus,
        topology: Topology,
        ledger: CreditLedger,
        *,
        community_size: int,
        member: bool = True,
        vcat_mode: bool = True,
        trading_scope: TradingScope = "shared_link",
        creator_metric: CreatorMetric = "credit",
    ):
        self.von = von
        self.von_id = von.id
        self.vlinks = {vlink.id: vlink for vlink in von.links}
        self.bus = bus
        self.topology = topology
        self.ledger = ledger
        self.community_size = community_size
        self.member = member
        self.vcat_mode = vcat_mode
        self.trading_scope = trading_scope
        self.creator_metric = creator_metric

        self.chain = Chain()
        self.trade_log: dict[int, Trade] = {}
        self.last_serial = 0
        self.rejected_blocks = 0
        # creator-side hook applied to a block before it is announced
        self.tamper: Optional[Callable[[Block], Block]] = None
        self._pending_block: Optional[Block] = None
        self._confirms: dict[int, tuple[bool, Optional[str]]] = {}
        self._reset_slot_state()

        bus.subscribe("st/request/+", self.on_request)
        bus.subscribe(f"st/offer/{von.id}", self.on_offer)
        bus.subscribe(f"st/commit/{von.id}", self.on_commit)
        bus.subscribe("st/ack/+", self.on_ack)
        bus.subscribe("st/reclaim/+", self.on_reclaim)
        bus.subscribe("st/release/+", self.on_release)
        bus.subscribe("st/block/announce/+", self.on_block_announce)
        bus.subscribe("st/block/confirm/+", self.on_block_confirm)

    def _reset_slot_state(self) -> None:
        self.slot: Optional[int] = None
        self.phase = Phase.IDLE
        self.needs: dict[int, VlinkNeed] = {}
        self.gated = False
        self.available = OfferBook()
        self.leases: dict[int, list[Lease]] = defaultdict(list)
        self.lent: dict[tuple[int, int], OfferCell] = {}
        self.withdrawn: set[int] = set()
        self.pending_refills: set[int] = set()
        self.session: Optional[_Session] = None
        self.offered: set[OfferCell] = set()

    # -- slot lifecycle --------------------------------------------------------

    def begin_slot(self, slot: int, demands: SlotDemand) -> list[OfferCell]:
        """Classify own links, open own offers and apply self-use.

        Returns the cells lent to itself so the carrier can reconfigure them.
        """
        self._reset_slot_state()
        self.slot = slot
        for vlink in self.von.links:
            need = vlink_need(vlink, demands.at(vlink.id, slot))
            self.needs[vlink.id] = need
            if not self.member:
                continue
            if need.deficit and self.ledger.is_forbidden(self.von_id):
                self.gated = True
            for cell in loanable_cells(vlink, need.surplus):
                self.available.add(cell)
        if not self.member or self.gated:
            return []

        self_used: list[OfferCell] = []
        for vlink_id in sorted(self.needs):
            need = self.needs[vlink_id]
            if not need.deficit:
                continue
            vlink = self.vlinks[vlink_id]
            chosen = choose_grants(
                vlink,
                need.deficit,
                self.available,
                self.ledger.snapshot(),
                self.vcat_mode,
                lender_ok=lambda cell: True,
                occupied=occupied_cells(vlink, self.leases[vlink_id]),
            )
            if not chosen:
                continue
            lease = Lease(vlink_id, self.von_id, None, {link: list(cells) for link, cells in chosen.items()})
            for cell in lease.all_cells():
                self.available.take(cell)
                self.lent[(cell.link, cell.fs)] = cell
                self_used.append(cell)
            self.leases[vlink_id].append(lease)
        return self_used

    def deficit_vlinks(self) -> list[int]:
        if not self.member or self.gated:
            return []
        return [vlink_id for vlink_id in sorted(self.needs) if self.needs[vlink_id].deficit]

    def can_refill(self) -> bool:
        return self.member and not self.gated

    def shortfall(self, vlink_id: int) -> int:
        acquired = sum(lease.width for lease in self.leases.get(vlink_id, ()))
        return max(0, self.needs[vlink_id].deficit - acquired)

    def slot_trades(self, slot: Optional[int] = None) -> list[Trade]:
        slot = self.slot if slot is None else slot
        return [self.trade_log[s] for s in sorted(self.trade_log) if self.trade_log[s].slot == slot]

    def capacities(self) -> dict[int, LinkCapacity]:
        lent_fs: dict[int, set[int]] = defaultdict(set)
        for cell in self.lent.values():
            lent_fs[cell.vlink].add(cell.fs)
        return {
            vlink_id: LinkCapacity(
                vlink.fs_count - len(lent_fs.get(vlink_id, ())),
                sum(lease.width for lease in self.leases.get(vlink_id, ())),
            )
            for vlink_id, vlink in self.vlinks.items()
        }

    def end_session(self) -> None:
        self.phase = Phase.IDLE
        self.session = None
        self.offered = set()

    def end_slot(self) -> None:
        self._reset_slot_state()

    # -- requesting side -------------------------------------------------------

    def request(self, vlink_id: int) -> bool:
        """Broadcast a TradeRequest for the link's shortfall; False if nothing is missing."""
        want = self.shortfall(vlink_id)
        if want <= 0:
            return False
        if self.phase is not Phase.IDLE:
            raise ProtocolViolation(f"VON {self.von_id}: request while {self.phase.value}")
        vlink = self.vlinks[vlink_id]
        self.phase = Phase.REQUESTING
        self.session = _Session(vlink, want)
        self.bus.publish(
            MessageKind.TRADE_REQUEST,
            self.von_id,
            {
                "slot": self.slot,
                "rc": self.von_id,
                "vlink": vlink_id,
                "route": list(vlink.route),
                "endpoints": sorted(vlink.physical_endpoints),
                "want": want,
            },
        )
        return True

    def on_offer(self, message: Message, data: dict) -> None:
        session = self.session
        if self.phase is not Phase.REQUESTING or session is None or data["vlink"] != session.vlink.id:
            raise ProtocolViolation(f"VON {self.von_id}: unexpected TradeOffer from VON {message.sender}")
        session.offers[data["tc"]] = (data["credit_units"], [OfferCell.from_list(item) for item in data["cells"]])

    def conclude_request(self) -> Optional[Trade]:
        """Select TCs from the collected offers and send them TradeCommits."""
        session = self.session
        if self.phase is not Phase.REQUESTING or session is None:
            raise ProtocolViolation(f"VON {self.von_id}: no open request to conclude")
        vlink = session.vlink
        book = OfferBook(cell for _, cells in session.offers.values() for cell in cells)
        credits = {tc: units for tc, (units, _) in session.offers.items()}
        chosen = choose_grants(
            vlink,
            session.want,
            book,
            credits,
            self.vcat_mode,
            lender_ok=lambda cell: cell.von != self.von_id,
            occupied=occupied_cells(vlink, self.leases[vlink.id]),
        )
        if not chosen:
            logger.debug("VON %d: no eligible offers for virtual link %d", self.von_id, vlink.id)
            return None

        serial = self.last_serial + 1
        trade = build_trade(serial, self.slot, vlink, chosen, self.topology)
        lease = Lease(vlink.id, self.von_id, serial, {link: list(cells) for link, cells in chosen.items()})
        self.leases[vlink.id].append(lease)
        self.phase = Phase.COMMITTING

        by_tc: dict[int, list[OfferCell]] = defaultdict(list)
        for cell in lease.all_cells():
            by_tc[cell.von].append(cell)
        for tc in sorted(by_tc):
            self.bus.publish(
                MessageKind.TRADE_COMMIT,
                self.von_id,
                {"slot": self.slot, "trade": trade.as_dict(), "cells": [cell.as_list() for cell in by_tc[tc]]},
                recipient=tc,
            )
        return trade

    # -- offering side ---------------------------------------------------------

    def on_request(self, message: Message, data: dict) -> None:
        if data["rc"] == self.von_id or not self.member:
            return
        if self.phase is not Phase.IDLE:
            raise ProtocolViolation(f"VON {self.von_id}: TradeRequest while {self.phase.value}")
        cells = [cell for link in data["route"] for cell in self.available.cells_on(link)]
        if not cells:
            return
        in_scope = scope_filter(tuple(data["endpoints"]), self.trading_scope)
        cells = [cell for cell in cells if in_scope(cell)]
        if not cells:
            return
        self.phase = Phase.OFFERING
        self.offered = set(cells)
        self.bus.publish(
            MessageKind.TRADE_OFFER,
            self.von_id,
            {
                "slot": self.slot,
                "rc": data["rc"],
                "vlink": data["vlink"],
                "tc": self.von_id,
                "credit_units": self.ledger.units(self.von_id),
                "cells": [cell.as_list() for cell in cells],
            },
            recipient=data["rc"],
        )

    def on_commit(self, message: Message, data: dict) -> None:
        serial = data["trade"]["serial"]
        if self.phase is not Phase.OFFERING:
            raise ProtocolViolation(
                f"VON {self.von_id}: TradeCommit {serial} from VON {message.sender} outside the Offering phase"
            )
        cells = [OfferCell.from_list(item) for item in data["cells"]]
        for cell in cells:
            if cell.von != self.von_id or cell not in self.offered:
                raise ProtocolViolation(
                    f"VON {self.von_id}: TradeCommit {serial} grants cell ({cell.link}, {cell.fs}) that was not offered"
                )
        for cell in cells:
            self.available.take(cell)
            self.offered.discard(cell)
            self.lent[(cell.link, cell.fs)] = cell
        self.phase = Phase.COMMITTING
        self.bus.publish(MessageKind.TRADE_ACK, self.von_id, {"slot": self.slot, "trade": data["trade"]})

    # -- every replica -----------------------------------------------------------

    def on_ack(self, message: Message, data: dict) -> None:
        trade = message.decoded("trade", lambda: Trade.from_dict(data["trade"]))
        self.last_serial = max(self.last_serial, trade.serial)
        if trade.serial in self.trade_log:
            return
        self.trade_log[trade.serial] = trade
        for contribution in trade.contributions:
            self.ledger.transfer(trade.rc, contribution.tc, contribution.credit_units)

    # -- reclaim -------------------------------------------------------------------

    def reclaim(self, vlink_id: int) -> bool:
        """Announce that every cell lent from ``vlink_id`` is taken back."""
        active = any(cell.vlink == vlink_id for cell in self.lent.values())
        if active:
            self.withdrawn.add(vlink_id)
            self.available.withdraw_vlink(vlink_id)
        self.bus.publish(
            MessageKind.RECLAIM_NOTICE,
            self.von_id,
            {"slot": self.slot, "tc": self.von_id, "vlink": vlink_id, "active": active},
        )
        return active

    def on_reclaim(self, message: Message, data: dict) -> None:
        if not data["active"]:
            return
        tc, withdrawn = data["tc"], data["vlink"]
        affected = sorted(
            (
                lease
                for leases in self.leases.values()
                for lease in leases
                if any(cell.von == tc and cell.vlink == withdrawn for cell in lease.all_cells())
            ),
            key=lambda lease: (lease.rc_vlink, lease.serial or 0),
        )
        for lease in affected:
            dropped = narrow_lease(lease, withdrawn)
            rebuilt = None
            if lease.serial is not None:
                rebuilt = build_trade(lease.serial, self.slot, self.vlinks[lease.rc_vlink], lease.cells, self.topology)
            if lease.width == 0:
                self.leases[lease.rc_vlink].remove(lease)
            self.pending_refills.add(lease.rc_vlink)
            self.bus.publish(
                MessageKind.RELEASE_NOTICE,
                self.von_id,
                {
                    "slot": self.slot,
                    "rc": self.von_id,
                    "rc_vlink": lease.rc_vlink,
                    "serial": lease.serial,
                    "withdrawn": withdrawn,
                    "dropped": [cell.as_list() for cell in dropped],
                    "trade": rebuilt.as_dict() if rebuilt is not None else None,
                },
            )

    def on_release(self, message: Message, data: dict) -> None:
        dropped = message.decoded("dropped", lambda: [OfferCell.from_list(item) for item in data["dropped"]])
        serial = data["serial"]
        if serial is not None:
            for cell in dropped:
                self.ledger.transfer(cell.von, data["rc"], self.topology.credit_weight(cell.link))
            if data["trade"] is None:
                self.trade_log.pop(serial, None)
            else:
                self.trade_log[serial] = message.decoded("trade", lambda: Trade.from_dict(data["trade"]))
        for cell in dropped:
            if cell.von != self.von_id:
                continue
            self.lent.pop((cell.link, cell.fs), None)
            if cell.vlink not in self.withdrawn:
                self.available.add(cell)

    # -- record maintenance ------------------------------------------------------

    def announce_block(self) -> Optional[Block]:
        block = build_slot_block(self.chain, self.slot_trades(), self.slot, self.creator_metric)
        if block is None:
            return None
        if self.tamper is not None:
            block = self.tamper(block)
        self.bus.publish(
            MessageKind.BLOCK_ANNOUNCE,
            self.von_id,
            {"slot": self.slot, "block": block_bytes(block).hex()},
        )
        return block

    def on_block_announce(self, message: Message, data: dict) -> None:
        self._confirms = {}
        block = None
        try:
            block = message.decoded("block", lambda: decode_block(bytes.fromhex(data["block"])))
        except (ChainFormatError, ValueError) as exc:
            reason: Optional[str] = f"malformed block: {exc}"
        else:
            trades = self.slot_trades(data["slot"])
            reason = verify_block(
                block,
                self.chain.tip_hash,
                transactions_for(trades, self.chain.next_serial),
                select_creator(trades, self.creator_metric),
            )
            if reason is None and block.creator_id != message.sender:
                reason = f"announced by VON {message.sender}, not by creator {block.creator_id}"
            if reason is None and block.slot_index != data["slot"]:
                reason = f"slot index {block.slot_index} != {data['slot']}"
        self._pending_block = block if reason is None else None
        self.bus.publish(
            MessageKind.BLOCK_CONFIRM,
            self.von_id,
            {
                "slot": data["slot"],
                "block_hash": block.block_hash.hex() if block is not None else None,
                "ok": reason is None,
                "reason": reason,
            },
        )

    def on_block_confirm(self, message: Message, data: dict) -> None:
        self._confirms[message.sender] = (data["ok"], data["reason"])
        if len(self._confirms) < self.community_size:
            return
        if self._pending_block is not None and all(ok for ok, _ in self._confirms.values()):
            self.chain.append(self._pending_block)
        else:
            self.rejected_blocks += 1
            reasons = sorted({reason for ok, reason in self._confirms.values() if not ok and reason})
            logger.error("❌ VON %d: block for slot %s rejected: %s", self.von_id, data["slot"], "; ".join(reasons))
        self._pending_block = None
        self._confirms = {}


class CarrierController:
    """The operator's controller: reconfigures the spectrum for every commit and release."""

    def __init__(self, bus: SimBus, spectrum: SpectrumState, latency_ms: float = 0.0):
        self.spectrum = spectrum
        self.latency_ms = latency_ms
        self.reconfigurations = 0
        bus.subscribe("st/commit/+", self.on_commit)
        bus.subscribe("st/release/+", self.on_release)

    @property
    def reconfig_ms(self) -> float:
        return self.reconfigurations * self.latency_ms

    def on_commit(self, message: Message, data: dict) -> None:
        borrower = data["trade"]["rc"]
        for item in data["cells"]:
            cell = OfferCell.from_list(item)
            self.spectrum.lend(cell.link, cell.fs, borrower)
        self.reconfigurations += 1

    def on_release(self, message: Message, data: dict) -> None:
        for item in data["dropped"]:
            cell = OfferCell.from_list(item)
            self.spectrum.revert(cell.link, cell.fs)
        self.reconfigurations += 1

    def apply_self_use(self, cells: Iterable[OfferCell], von: int) -> None:
        cells = list(cells)
        for cell in cells:
            self.spectrum.lend(cell.link, cell.fs, von)
        if cells:
            self.reconfigurations += 1

    def expire_slot(self) -> int:
        released = self.spectrum.revert_all()
        if released:
            self.reconfigurations += 1
        return released


class TradingCommunity:
    """The actors of one run plus the carrier controller, driven slot by slot."""

    def __init__(
        self,
        topology: Topology,
        spectrum: SpectrumState,
        vons: Iterable[Von],
        threshold_mu: float,
        *,
        vcat_mode: bool = True,
        trading_scope: TradingScope = "shared_link",
        members: Optional[Iterable[int]] = None,
        creator_metric: CreatorMetric = "credit",
        reconfig_latency_ms: float = 0.0,
        bus: Optional[SimBus] = None,
    ):
        self.bus = bus if bus is not None else SimBus()
        self.creator_metric = creator_metric
        vons = sorted(vons, key=lambda von: von.id)
        von_ids = [von.id for von in vons]
        members = frozenset(members) if members is not None else None
        self.actors: dict[int, ClientActor] = {
            von.id: ClientActor(
                von,
                self.bus,
                topology,
                CreditLedger(von_ids, threshold_mu),
                community_size=len(vons),
                member=members is None or von.id in members,
                vcat_mode=vcat_mode,
                trading_scope=trading_scope,
                creator_metric=creator_metric,
            )
            for von in vons
        }
        self.carrier = CarrierController(self.bus, spectrum, reconfig_latency_ms)
        self.slot: Optional[int] = None
        self.credits_at_start: dict[int, int] = {}

    @property
    def observer(self) -> ClientActor:
        """Lowest-id actor; every replica is identical so any one can be read."""
        return self.actors[min(self.actors)]

    @property
    def ledger(self) -> CreditLedger:
        return self.observer.ledger

    @property
    def chain(self) -> Chain:
        return self.observer.chain

    @property
    def rejected_blocks(self) -> int:
        return self.observer.rejected_blocks

    def begin_slot(self, slot: int, demands: SlotDemand) -> None:
        self.slot = slot
        self.credits_at_start = self.ledger.snapshot()
        for actor in self.actors.values():
            self.carrier.apply_self_use(actor.begin_slot(slot, demands), actor.von_id)

    def _session(self, actor: ClientActor, vlink_id: int) -> Optional[Trade]:
        if not actor.request(vlink_id):
            return None
        self.bus.run()
        trade = actor.conclude_request()
        self.bus.run()
        for each in self.actors.values():
            each.end_session()
        return trade

    def run_slot_protocol(self, slot: int, demands: SlotDemand) -> tuple[list[Trade], list[Message]]:
        """Run every RC's Request/Offer/Commit/Ack session for one slot.

        Returns the executed trades and the messages exchanged.
        """
        mark = len(self.bus.trace)
        self.begin_slot(slot, demands)
        requesters = rc_order(
            [von for von, actor in self.actors.items() if actor.deficit_vlinks()],
            self.credits_at_start,
        )
        executed = []
        for rc in requesters:
            actor = self.actors[rc]
            for vlink_id in actor.deficit_vlinks():
                trade = self._session(actor, vlink_id)
                if trade is not None:
                    executed.append(trade)
        logger.debug("slot %d: %d trades from %d requesters", slot, len(executed), len(requesters))
        return executed, self.bus.trace_since(mark)

    def run_reclaim_protocol(self, tc: int, vlink_id: int) -> ReclaimOutcome:
        """TC takes back ``vlink_id``'s loans; affected RCs release and re-request."""
        mark = len(self.bus.trace)
        active = self.actors[tc].reclaim(vlink_id)
        self.bus.run()
        if not active:
            return ReclaimOutcome([], [], [])

        released = [
            OfferCell.from_list(item)
            for message in self.bus.trace_since(mark)
            if message.kind is MessageKind.RELEASE_NOTICE
            for item in message.as_record()["payload"]["dropped"]
        ]
        refills = sorted(
            ((actor.von_id, v) for actor in self.actors.values() for v in actor.pending_refills),
            key=lambda pair: (-self.credits_at_start[pair[0]], pair[0], pair[1]),
        )
        for actor in self.actors.values():
            actor.pending_refills.clear()

        retrades = []
        for rc, rc_vlink in refills:
            actor = self.actors[rc]
            if not actor.can_refill():
                continue
            trade = self._session(actor, rc_vlink)
            if trade is not None:
                retrades.append(trade)
        logger.info("VON %d reclaimed %d cells from virtual link %d", tc, len(released), vlink_id)
        return ReclaimOutcome(sorted(released), sorted({v for _, v in refills}), retrades)

    def build_and_commit_block(self) -> Optional[Block]:
        """The slot's creator announces its block; it is kept only if every actor confirms."""
        creator = select_creator(self.observer.slot_trades(), self.creator_metric)
        if creator is None:
            return None
        height = len(self.chain)
        self.actors[creator].announce_block()
        self.bus.run()
        if len(self.chain) == height:
            return None
        block = self.chain.blocks[-1]
        logger.info("✅ block %d for slot %d committed by VON %d (%d transactions)",
                    height, block.slot_index, creator, len(block.transactions))
        return block

    def slot_trades(self) -> list[Trade]:
        return self.observer.slot_trades()

    def capacities(self) -> dict[int, LinkCapacity]:
        capacities: dict[int, LinkCapacity] = {}
        for actor in self.actors.values():
            capacities.update(actor.capacities())
        return capacities

    def release_slot(self) -> int:
        """Trading agreements expire: every loan reverts, credits stay."""
        released = self.carrier.expire_slot()
        for actor in self.actors.values():
            actor.end_slot()
        return released

    def replicas_identical(self) -> bool:
        reference = self.observer
        chain_bytes = reference.chain.to_bytes()
        balances = reference.ledger.snapshot()
        return all(
            actor.chain.to_bytes() == chain_bytes and actor.ledger.snapshot() == balances
            for actor in self.actors.values()
        )
