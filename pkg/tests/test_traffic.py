import math

import numpy as np
import pytest

from conftest import make_vlink
from trading.embedding import BPSK, QPSK, VirtualLink, Von
from trading.traffic import LinkCapacity, SlotDemand, fs_needed, generate_demands, settle_link, settle_slot


def bpsk_link(fs_count=2):
    return VirtualLink(0, 0, (0, 1), (0, 1), (0,), BPSK, tuple(range(fs_count)))


@pytest.mark.parametrize(
    "offered, expected",
    [(170.0, 4), (0.0, 0), (200.0, 4), (200.1, 5), (1.0, 1)],
)
def test_fs_needed_qpsk(offered, expected):
    assert fs_needed(offered, QPSK) == expected


def test_fs_needed_rejects_negative():
    with pytest.raises(ValueError):
        fs_needed(-1.0, QPSK)


def test_fs_needed_is_monotone():
    values = [fs_needed(x, QPSK) for x in np.linspace(0, 500, 1001)]
    assert values == sorted(values)


def test_demand_range_and_mean():
    vlink = bpsk_link()
    assert vlink.capacity_gbps == 50
    demands = generate_demands(np.random.default_rng(11), [Von(0, (0, 1), (vlink,))], 100_000)
    draws = np.array(demands.offered[0])
    assert draws.min() >= 10 and draws.max() <= 90
    assert draws.mean() == pytest.approx(50, rel=0.02)


def test_demand_range_for_qpsk_three_fs(three_node):
    vlink = make_vlink(three_node, 0, 0, (0, 1), [0, 1], [0, 1, 2])
    assert vlink.capacity_gbps == 150
    demands = generate_demands(np.random.default_rng(3), [Von(0, (0, 1), (vlink,))], 1000)
    assert all(10 <= x <= 290 for x in demands.offered[0])


def test_demands_are_deterministic():
    vons = [Von(0, (0, 1), (bpsk_link(),))]
    assert generate_demands(np.random.default_rng(5), vons, 4) == generate_demands(np.random.default_rng(5), vons, 4)


def test_quarter_blocked_without_trade(three_node):
    vlink = make_vlink(three_node, 2, 2, (0, 1), [0, 1], [3, 4, 5])
    row = settle_link(vlink, 200.0, LinkCapacity(3), 0)
    assert row.blocked_gbps / row.offered_gbps == pytest.approx(0.25)
    assert row.own_fs_used == 3 and row.traded_fs_used == 0


def test_acquired_fs_carries_everything(three_node):
    vlink = make_vlink(three_node, 2, 2, (0, 1), [0, 1], [3, 4, 5])
    row = settle_link(vlink, 200.0, LinkCapacity(3, 1), 0)
    assert row.blocked_gbps == 0
    assert row.carried_gbps == 200
    assert row.traded_fs_used == 1


def test_overprovisioned_link():
    row = settle_link(bpsk_link(), 10.0, LinkCapacity(2), 0)
    assert (row.carried_gbps, row.blocked_gbps) == (10.0, 0.0)
    assert row.own_fs_used == 1


def test_lent_surplus_never_reduces_carried():
    # 1 of 3 FSs lent: 2 retained still cover the 40 Gb/s offered
    vlink = bpsk_link(3)
    assert settle_link(vlink, 40.0, LinkCapacity(2), 0).carried_gbps == 40.0


def test_settle_slot_conservation():
    links = [VirtualLink(i, 0, (0, 1), (0, 1), (0,), BPSK, (2 * i, 2 * i + 1)) for i in range(5)]
    vons = [Von(0, (0, 1), tuple(links))]
    demands = SlotDemand({i: (10.0 + 17 * i,) for i in range(5)}, 1)
    result = settle_slot(0, vons, demands, {1: LinkCapacity(1, 0), 4: LinkCapacity(2, 3)})
    assert math.isclose(result.carried_gbps + result.blocked_gbps, result.offered_gbps)
    assert result.offered_gbps == pytest.approx(demands.slot_total(0))
    by_link = {row.vlink_id: row for row in result.rows}
    assert by_link[1].carried_gbps == 25.0
    assert by_link[4].carried_gbps == 78.0
