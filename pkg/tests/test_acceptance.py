import time

import numpy as np
import pytest

from conftest import DATA, ROOT, VON1, VON2, TwoVonLine, trade_key
from harness.experiment import run_experiment as run_sweep
from harness.seeds import SeedPlan
from harness.simulation import build_scenario, simulate_nonst, simulate_st
from models.schemas import RunConfig
from run_experiment import load_config
from trading.chain import block_bytes, verify_chain, verify_chain_bytes
from trading.credit import CreditLedger
from trading.engine import TradingEngine
from trading.topology import load_topology
from trading.traffic import SlotDemand, settle_slot


def scale_config(name, **overrides):
    config = load_config(str(ROOT / "configs" / name))
    return config.model_copy(update={"topology": str(DATA / "usnet.json"), **overrides})


def test_two_von_end_to_end():
    two_vons = TwoVonLine()
    ledger = two_vons.ledger()
    engine = TradingEngine(two_vons.topology, two_vons.spectrum, two_vons.vons, ledger)
    (trade,) = engine.run_slot(0, two_vons.demands)
    (contribution,) = trade.contributions
    assert contribution.grants == ((0, (1,)), (1, (2,)))
    assert ledger.credits() == {VON1: pytest.approx(1.4), VON2: pytest.approx(-1.4)}

    with_trading = settle_slot(0, two_vons.vons, two_vons.demands, engine.capacities())
    without = settle_slot(0, two_vons.vons, two_vons.demands)
    assert with_trading.blocked_gbps == 0
    (a2b2,) = [row for row in without.rows if row.vlink_id == two_vons.a2b2.id]
    assert a2b2.blocked_gbps / a2b2.offered_gbps == pytest.approx(0.25)
    assert without.blocked_gbps == a2b2.blocked_gbps


def test_gated_von_is_excluded_then_readmitted():
    two_vons = TwoVonLine(slots=3)
    # slot 0: VON2 short on a2-b2; slot 1: VON1 short on b1-c1 while a2-b2 idles
    demands = SlotDemand({0: (60.0, 60.0, 60.0), 1: (120.0, 260.0, 120.0), 2: (200.0, 0.0, 200.0)}, 3)
    ledger = CreditLedger(two_vons.von_ids, -1.0)
    ledger.set_units(VON1, 1_500_000)
    ledger.set_units(VON2, -1_500_000)
    engine = TradingEngine(two_vons.topology, two_vons.spectrum, two_vons.vons, ledger)

    assert engine.run_slot(0, demands) == []
    assert engine.roles.gated == {VON2}
    assert engine.capacities()[two_vons.a2b2.id].acquired == 0
    engine.release_trades()

    (repayment,) = engine.run_slot(1, demands)
    assert (repayment.rc, [c.tc for c in repayment.contributions]) == (VON1, [VON2])
    assert ledger.credit(VON2) == pytest.approx(-0.7)
    engine.release_trades()

    (trade,) = engine.run_slot(2, demands)
    assert trade.rc == VON2
    assert engine.capacities()[two_vons.a2b2.id].acquired == 1
    assert ledger.credit(VON2) == pytest.approx(-2.1)
    assert ledger.total_units() == 0


@pytest.mark.parametrize("mu, expect_trading", [(-1e9, True), (1e9, False)])
def test_threshold_extremes(mu, expect_trading):
    config = RunConfig(
        topology=str(DATA / "usnet.json"), von_count=10, slots=2, fs_per_vlink=[4],
        threshold_mu=mu, replications=2, seed=3,
    )
    report = run_sweep(config)
    st_rows = [row for row in report.rows if row.mode == "st"]
    if expect_trading:
        assert any(row.trades for row in st_rows)
    else:
        assert all(row.trades == 0 and row.traded_fs == 0 for row in st_rows)
        assert all(row.improvement_pct == 0 for row in st_rows)


# -- full-scale runs --------------------------------------------------------------


@pytest.mark.slow
def test_fs_sweep_trend():
    started = time.perf_counter()
    report = run_sweep(scale_config("fs_sweep.json"))
    assert time.perf_counter() - started < 300
    by_fs = {point.fs_per_vlink: point for point in report.points}
    assert all(point.feasible for point in report.points)
    assert all(point.mean_improvement_pct > 0 for point in report.points)
    assert max(by_fs[8].mean_improvement_pct, by_fs[10].mean_improvement_pct) > by_fs[2].mean_improvement_pct
    for fs in (8, 10):
        assert 10.0 <= by_fs[fs].mean_improvement_pct <= 35.0
    assert all(row.credit_sum_units == 0 for row in report.rows)
    assert all(chain.verified and chain.rejected_blocks == 0 for chain in report.chains)
    for row in report.rows:
        if row.mode == "st":
            assert row.improvement_pct >= 0


@pytest.mark.slow
def test_default_fiber_only_fits_the_narrowest_assignment():
    # 358 FSs per fiber hold 50 VONs at 2 FSs per virtual link and no wider
    report = run_sweep(scale_config("default.json", replications=1))
    assert [(p.fs_per_vlink, p.feasible) for p in report.points] == [
        (2, True), (4, False), (6, False), (8, False), (10, False),
    ]
    assert sorted(row.mode for row in report.rows) == ["nonst", "st"]


@pytest.mark.slow
def test_threshold_sweep_saturates():
    config = scale_config("mu_sweep.json")
    started = time.perf_counter()
    report = run_sweep(config, sweep="mu")
    assert time.perf_counter() - started < 600
    assert all(row.credit_sum_units == 0 for row in report.rows)
    for fs in config.mu_sweep_fs:
        curve = {p.threshold_mu: p.mean_improvement_pct for p in report.points if p.fs_per_vlink == fs}
        assert set(curve) == set(config.mu_sweep)
        peak = max(curve.values())
        assert curve[-30.0] >= 0.9 * peak
        assert abs(curve[-50.0] - curve[-40.0]) < 0.05 * abs(curve[-40.0])


@pytest.fixture(scope="module")
def four_slot_run():
    config = RunConfig(
        topology=str(DATA / "usnet.json"), von_count=20, slots=4, fs_per_vlink=[4],
        fs_total=6000, seed=77, replications=1, debug_audit=True,
    )
    topology = load_topology(config.topology, fs_total=config.fs_total)
    scenario = build_scenario(topology, config, 4, 0, SeedPlan(config.seed))
    return config, topology, scenario, simulate_st(scenario, config, config.threshold_mu)


@pytest.mark.slow
def test_chain_detects_every_bit_flip(four_slot_run):
    _, _, _, outcome = four_slot_run
    assert len(outcome.chain) > 1
    data = outcome.chain.to_bytes()
    ends = np.cumsum([len(block_bytes(block)) for block in outcome.chain.blocks])
    for bit in range(len(data) * 8):
        corrupted = bytearray(data)
        corrupted[bit // 8] ^= 1 << (bit % 8)
        verdict = verify_chain_bytes(bytes(corrupted), outcome.trades)
        assert not verdict.ok
        assert verdict.failed_index == int(np.searchsorted(ends, bit // 8, side="right"))


@pytest.mark.slow
def test_chain_replays_byte_identically(four_slot_run):
    config, topology, _, outcome = four_slot_run
    replayed = simulate_st(build_scenario(topology, config, 4, 0, SeedPlan(config.seed)), config, config.threshold_mu)
    assert replayed.chain.to_bytes() == outcome.chain.to_bytes()
    assert verify_chain(outcome.chain, outcome.trades)


@pytest.mark.slow
def test_trading_never_lowers_carried_traffic(four_slot_run):
    config, _, scenario, outcome = four_slot_run
    assert outcome.carried_gbps >= simulate_nonst(scenario).carried_gbps
    assert sum(outcome.credits.values()) == 0


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(50))
def test_protocol_matches_engine_at_full_scale(seed):
    config = scale_config("fs_sweep.json", seed=seed, replications=1)
    topology = load_topology(config.topology, fs_total=config.fs_total)
    scenario = build_scenario(topology, config, 6, 0, SeedPlan(seed))
    distributed = simulate_st(scenario, config, config.threshold_mu)
    centralized = simulate_st(scenario, config.model_copy(update={"engine": "centralized"}), config.threshold_mu)
    assert [trade_key(t) for t in distributed.trades] == [trade_key(t) for t in centralized.trades]
    assert distributed.credits == centralized.credits
    assert distributed.chain.to_bytes() == centralized.chain.to_bytes()
