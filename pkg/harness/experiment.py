"""Seeded sweeps over FS assignment or forbidden threshold, ST vs non-ST."""
import logging
import statistics
from pathlib import Path
from typing import Callable, Iterable, Optional, Union

from harness.seeds import SeedPlan
from harness.simulation import Scenario, SimulationOutcome, build_scenario, simulate_nonst, simulate_st
from models.schemas import (
    ChainSummary,
    LedgerSnapshot,
    Mode,
    PointSummary,
    RunConfig,
    RunReport,
    ScenarioRecord,
    SimulationRow,
    Sweep,
    VonSpecOut,
)
from protocol.bus import export_trace
from trading.chain import Chain, verify_chain_bytes
from trading.errors import EmbeddingBudgetExceeded
from trading.topology import Topology, load_topology

logger = logging.getLogger(__name__)

ASSUMPTIONS = [
    "virtual topologies are connected (random spanning tree plus extra edges)",
    "offered traffic is uniform in [10, 2X-10] Gb/s per virtual link and slot",
    "RC sessions are serialized in descending slot-start credit",
    "a VON never trades with itself; own surplus is applied before the market",
]


def sweep_points(config: RunConfig, sweep: Sweep) -> list[tuple[int, float]]:
    if sweep == "mu":
        return [(fs, mu) for fs in config.mu_sweep_fs for mu in config.mu_sweep]
    return [(fs, config.threshold_mu) for fs in config.fs_per_vlink]


def improvement_pct(carried_st: float, carried_nonst: float) -> Optional[float]:
    if carried_nonst <= 0:
        return None
    return (carried_st - carried_nonst) / carried_nonst * 100.0


def _row(
    sweep: Sweep,
    scenario: Scenario,
    mu: float,
    seed: int,
    outcome: SimulationOutcome,
    improvement: Optional[float],
) -> SimulationRow:
    return SimulationRow(
        sweep=sweep,
        fs_per_vlink=scenario.fs_per_vlink,
        threshold_mu=mu,
        replication=scenario.replication,
        mode=outcome.mode,
        seed=seed,
        offered_gbps=outcome.offered_gbps,
        carried_gbps=outcome.carried_gbps,
        blocked_gbps=outcome.blocked_gbps,
        improvement_pct=improvement,
        trades=len(outcome.trades),
        traded_fs=outcome.traded_fs,
        embed_retries=scenario.retries,
        blocks=len(outcome.chain) if outcome.chain is not None else 0,
        rejected_blocks=outcome.rejected_blocks,
        chain_tip=outcome.chain.tip_hash.hex() if outcome.chain is not None else None,
        credit_sum_units=sum(outcome.credits.values()),
        messages=outcome.messages,
        reconfig_ms=outcome.reconfig_ms,
    )


def _scenario_record(scenario: Scenario) -> ScenarioRecord:
    return ScenarioRecord(
        fs_per_vlink=scenario.fs_per_vlink,
        replication=scenario.replication,
        embed_retries=scenario.retries,
        vons=[VonSpecOut.model_validate(spec.as_dict()) for spec in scenario.specs],
    )


def _summarize(sweep: Sweep, fs: int, mu: float, rows: list[SimulationRow], feasible: bool) -> PointSummary:
    improvements = [row.improvement_pct for row in rows if row.mode == "st" and row.improvement_pct is not None]
    carried_st = [row.carried_gbps for row in rows if row.mode == "st"]
    carried_nonst = [row.carried_gbps for row in rows if row.mode == "nonst"]
    return PointSummary(
        sweep=sweep,
        fs_per_vlink=fs,
        threshold_mu=mu,
        replications=len({row.replication for row in rows}),
        feasible=feasible,
        mean_improvement_pct=statistics.fmean(improvements) if improvements else None,
        min_improvement_pct=min(improvements) if improvements else None,
        max_improvement_pct=max(improvements) if improvements else None,
        mean_carried_st=statistics.fmean(carried_st) if carried_st else None,
        mean_carried_nonst=statistics.fmean(carried_nonst) if carried_nonst else None,
    )


def run_experiment(
    config: RunConfig,
    *,
    sweep: Sweep = "fs",
    modes: Iterable[Mode] = ("st", "nonst"),
    trace_dir: Optional[Union[str, Path]] = None,
    topology: Optional[Topology] = None,
    on_chain: Optional[Callable[[ChainSummary, Chain], None]] = None,
) -> RunReport:
    """Simulate every (point, replication) of the sweep in the requested modes.

    ``on_chain`` receives each ST simulation's chain with its summary, for
    callers that keep the blocks (the database layer).
    """
    modes = [mode for mode in ("st", "nonst") if mode in set(modes)]
    if not modes:
        raise ValueError("at least one mode is required")
    if topology is None:
        topology = load_topology(
            config.topology,
            fs_total=config.fs_total,
            normalization=config.normalization,
            normalization_km=config.normalization_km,
        )
    seeds = SeedPlan(config.seed)
    report = RunReport(config=config, seed=config.seed, sweep=sweep, modes=modes, assumptions=list(ASSUMPTIONS))

    # the embedding and demands depend only on (fs, replication), so mu points share them
    scenarios: dict[tuple[int, int], Optional[Scenario]] = {}

    for fs, mu in sweep_points(config, sweep):
        logger.info("Point fs_per_vlink=%d mu=%g (%d replications)", fs, mu, config.replications)
        point_rows: list[SimulationRow] = []
        feasible = True
        for replication in range(config.replications):
            key = (fs, replication)
            if key not in scenarios:
                try:
                    scenarios[key] = build_scenario(topology, config, fs, replication, seeds)
                    report.scenarios.append(_scenario_record(scenarios[key]))
                except EmbeddingBudgetExceeded as exc:
                    logger.warning("⚠️ point fs=%d infeasible: %s", fs, exc)
                    scenarios[key] = None
            scenario = scenarios[key]
            if scenario is None:
                feasible = False
                break

            seed = seeds.replication_seed(fs, replication)
            nonst = simulate_nonst(scenario) if "nonst" in modes else None
            st = simulate_st(scenario, config, mu) if "st" in modes else None
            improvement = None
            if st is not None and nonst is not None:
                improvement = improvement_pct(st.carried_gbps, nonst.carried_gbps)
                if st.carried_gbps < nonst.carried_gbps:
                    logger.warning("⚠️ trading lowered carried traffic at fs=%d mu=%g rep=%d", fs, mu, replication)

            if st is not None:
                point_rows.append(_row(sweep, scenario, mu, seed, st, improvement))
                verdict = verify_chain_bytes(st.chain.to_bytes(), st.trades, config.creator_metric)
                summary = ChainSummary(
                    fs_per_vlink=fs,
                    threshold_mu=mu,
                    replication=replication,
                    blocks=len(st.chain),
                    transactions=st.chain.transaction_count,
                    tip_hash=st.chain.tip_hash.hex(),
                    verified=verdict.ok,
                    rejected_blocks=st.rejected_blocks,
                )
                report.chains.append(summary)
                report.ledger_snapshots.extend(
                    LedgerSnapshot(fs_per_vlink=fs, threshold_mu=mu, replication=replication, slot=slot, credit_units=units)
                    for slot, units in enumerate(st.ledger_snapshots)
                )
                if on_chain is not None:
                    on_chain(summary, st.chain)
                if trace_dir is not None and st.trace:
                    name = f"trace_{sweep}_fs{fs}_mu{mu:g}_rep{replication}.jsonl"
                    export_trace(st.trace, Path(trace_dir) / name)
            if nonst is not None:
                point_rows.append(_row(sweep, scenario, mu, seed, nonst, None))
            logger.debug("fs=%d mu=%g rep=%d improvement=%s", fs, mu, replication, improvement)

        if not feasible:
            point_rows = []
        report.rows.extend(point_rows)
        report.points.append(_summarize(sweep, fs, mu, point_rows, feasible))

    logger.info("Experiment finished: %d rows, %d points", len(report.rows), len(report.points))
    return report
