"""
One simulation: a fixed embedding and demand matrix run over T slots, with
or without spectrum trading.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

from harness.seeds import SeedPlan
from models.schemas import RunConfig
from protocol.actors import TradingCommunity
from protocol.bus import Message
from trading.chain import Chain, build_slot_block
from trading.credit import CreditLedger
from trading.embedding import Von, VonSpec, embed_vons
from trading.engine import Trade, TradingEngine
from trading.errors import SpectrumAuditError
from trading.spectrum import SpectrumState
from trading.topology import Topology
from trading.traffic import SlotDemand, SlotResult, generate_demands, settle_slot

logger = logging.getLogger(__name__)


@dataclass
class Scenario:
    """Embedded VONs and their demands; shared by the ST and non-ST runs of a pair."""

    topology: Topology
    fs_per_vlink: int
    replication: int
    vons: list[Von]
    demands: SlotDemand
    spectrum: SpectrumState
    specs: list[VonSpec] = field(default_factory=list)
    retries: int = 0


@dataclass
class SimulationOutcome:
    mode: str
    slot_results: list[SlotResult]
    trades: list[Trade]
    credits: dict[int, int]
    chain: Optional[Chain] = None
    rejected_blocks: int = 0
    messages: int = 0
    reconfig_ms: float = 0.0
    trace: list[Message] = field(default_factory=list)
    # cumulative credit units after each slot
    ledger_snapshots: list[dict[int, int]] = field(default_factory=list)

    @property
    def offered_gbps(self) -> float:
        return math.fsum(result.offered_gbps for result in self.slot_results)

    @property
    def carried_gbps(self) -> float:
        return math.fsum(result.carried_gbps for result in self.slot_results)

    @property
    def blocked_gbps(self) -> float:
        return math.fsum(result.blocked_gbps for result in self.slot_results)

    @property
    def traded_fs(self) -> int:
        return sum(c.fs_count for trade in self.trades for c in trade.contributions)


def build_scenario(
    topology: Topology,
    config: RunConfig,
    fs_per_vlink: int,
    replication: int,
    seeds: SeedPlan,
) -> Scenario:
    """Generate and embed the VONs, then draw their demands.

    Raises EmbeddingBudgetExceeded when a VON cannot be placed.
    """
    spectrum = SpectrumState(len(topology.links), topology.fs_total, debug=config.debug_audit)
    vons, specs, retries = embed_vons(
        topology,
        spectrum,
        config.von_count,
        fs_per_vlink,
        lambda von_id, attempt: seeds.generator("embedding", fs_per_vlink, replication, von_id, attempt),
        guard_fs=config.guard_fs,
        k=config.k_paths,
        max_retries=config.max_embed_retries,
    )
    demands = generate_demands(seeds.generator("demand", fs_per_vlink, replication), vons, config.slots)
    return Scenario(topology, fs_per_vlink, replication, vons, demands, spectrum, specs, retries)


def _check_zero_sum(ledger: CreditLedger, slot: int) -> None:
    total = ledger.total_units()
    if total != 0:
        raise SpectrumAuditError(f"credit ledger off by {total} units after slot {slot}")


def simulate_nonst(scenario: Scenario) -> SimulationOutcome:
    """Every VON keeps exactly its assigned FSs."""
    results = [
        settle_slot(slot, scenario.vons, scenario.demands)
        for slot in range(scenario.demands.slots)
    ]
    return SimulationOutcome("nonst", results, [], {von.id: 0 for von in scenario.vons})


def simulate_st(scenario: Scenario, config: RunConfig, threshold_mu: float) -> SimulationOutcome:
    if config.engine == "centralized":
        return _simulate_centralized(scenario, config, threshold_mu)
    return _simulate_protocol(scenario, config, threshold_mu)


def _simulate_centralized(scenario: Scenario, config: RunConfig, threshold_mu: float) -> SimulationOutcome:
    ledger = CreditLedger((von.id for von in scenario.vons), threshold_mu)
    engine = TradingEngine(
        scenario.topology,
        scenario.spectrum.copy(),
        scenario.vons,
        ledger,
        vcat_mode=config.vcat_mode,
        trading_scope=config.trading_scope,
        members=config.members(),
    )
    chain = Chain()
    results: list[SlotResult] = []
    log: list[Trade] = []
    snapshots: list[dict[int, int]] = []
    for slot in range(scenario.demands.slots):
        engine.run_slot(slot, scenario.demands)
        results.append(settle_slot(slot, scenario.vons, scenario.demands, engine.capacities()))
        trades = engine.slot_trades()
        block = build_slot_block(chain, trades, slot, config.creator_metric)
        if block is not None:
            chain.append(block)
        log.extend(trades)
        engine.release_trades()
        _check_zero_sum(ledger, slot)
        snapshots.append(ledger.snapshot())
    return SimulationOutcome("st", results, log, ledger.snapshot(), chain, ledger_snapshots=snapshots)


def _simulate_protocol(scenario: Scenario, config: RunConfig, threshold_mu: float) -> SimulationOutcome:
    community = TradingCommunity(
        scenario.topology,
        scenario.spectrum.copy(),
        scenario.vons,
        threshold_mu,
        vcat_mode=config.vcat_mode,
        trading_scope=config.trading_scope,
        members=config.members(),
        creator_metric=config.creator_metric,
        reconfig_latency_ms=config.reconfig_latency_ms,
    )
    results: list[SlotResult] = []
    log: list[Trade] = []
    snapshots: list[dict[int, int]] = []
    for slot in range(scenario.demands.slots):
        community.run_slot_protocol(slot, scenario.demands)
        results.append(settle_slot(slot, scenario.vons, scenario.demands, community.capacities()))
        log.extend(community.slot_trades())
        community.build_and_commit_block()
        community.release_slot()
        _check_zero_sum(community.ledger, slot)
        snapshots.append(community.ledger.snapshot())
        if config.debug_audit and not community.replicas_identical():
            raise SpectrumAuditError(f"actor replicas diverged after slot {slot}")
    return SimulationOutcome(
        "st",
        results,
        log,
        community.ledger.snapshot(),
        community.chain,
        rejected_blocks=community.rejected_blocks,
        messages=len(community.bus.trace),
        reconfig_ms=community.carrier.reconfig_ms,
        trace=list(community.bus.trace),
        ledger_snapshots=snapshots,
    )
