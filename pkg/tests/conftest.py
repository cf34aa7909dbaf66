import os
from pathlib import Path

# must be set before database.py is first imported
os.environ.setdefault("SPECTRUM_DB_URL", "sqlite://")

import pytest

from trading.credit import CreditLedger
from trading.embedding import VirtualLink, Von, first_fit_block, select_modulation
from trading.spectrum import SpectrumState
from trading.topology import load_topology
from trading.traffic import SlotDemand

ROOT = Path(__file__).resolve().parent.parent
DATA = ROOT / "data"

# three-node line A - C - B
A, B, C = 0, 1, 2
LINK_AC, LINK_CB = 0, 1

# VON ids in the two-VON example: VON1 lends, VON2 borrows
VON1, VON2, VON3 = 1, 2, 3


def make_vlink(topology, vlink_id, von_id, physical_endpoints, route, fs_block, endpoints=(0, 1)):
    return VirtualLink(
        id=vlink_id,
        von_id=von_id,
        endpoints=endpoints,
        physical_endpoints=physical_endpoints,
        route=tuple(route),
        modulation=select_modulation(topology.route_length(route)),
        fs_block=tuple(fs_block),
    )


def assign_all(spectrum, vons):
    for von in vons:
        for vlink in von.links:
            spectrum.assign(vlink.route, vlink.fs_block, von.id)


class TwoVonLine:
    """VON1 owns a1-c1 (A-C) and b1-c1 (C-B); VON2 owns a2-b2 routed A-C-B.

    Per slot a1-c1 needs 1 of 3 FSs, b1-c1 needs 2 of 3 and a2-b2 needs 4 of 3.
    """

    def __init__(self, slots=1, with_alternative=False):
        self.topology = load_topology(
            DATA / "three_node.json", fs_total=16, normalization="fixed", normalization_km=1000
        )
        t = self.topology
        self.a1c1 = make_vlink(t, 0, VON1, (A, C), [LINK_AC], [0, 1, 2], (0, 1))
        self.b1c1 = make_vlink(t, 1, VON1, (C, B), [LINK_CB], [0, 1, 2], (2, 1))
        self.a2b2 = make_vlink(t, 2, VON2, (A, B), [LINK_AC, LINK_CB], [3, 4, 5])
        self.vons = [
            Von(VON1, (A, C, B), (self.a1c1, self.b1c1)),
            Von(VON2, (A, B), (self.a2b2,)),
        ]
        offered = {0: (60.0,) * slots, 1: (120.0,) * slots, 2: (200.0,) * slots}
        if with_alternative:
            # VON3 needs none of its 2 FSs on A-C-B
            self.a3b3 = make_vlink(t, 3, VON3, (A, B), [LINK_AC, LINK_CB], [6, 7])
            self.vons.append(Von(VON3, (A, B), (self.a3b3,)))
            offered[3] = (0.0,) * slots
        self.demands = SlotDemand(offered, slots)
        self.spectrum = SpectrumState(len(t.links), t.fs_total, debug=True)
        assign_all(self.spectrum, self.vons)

    @property
    def von_ids(self):
        return [von.id for von in self.vons]

    def ledger(self, threshold_mu=-30.0):
        return CreditLedger(self.von_ids, threshold_mu)


@pytest.fixture
def three_node():
    return load_topology(DATA / "three_node.json", normalization="fixed", normalization_km=1000)


@pytest.fixture(scope="session")
def usnet():
    return load_topology(DATA / "usnet.json")


@pytest.fixture
def two_vons():
    return TwoVonLine()


@pytest.fixture
def two_vons_two_slots():
    return TwoVonLine(slots=2)


@pytest.fixture
def two_vons_alternative():
    return TwoVonLine(with_alternative=True)


def line_topology(lengths, fs_total):
    return load_topology(
        {
            "nodes": [{"id": i, "name": f"n{i}"} for i in range(len(lengths) + 1)],
            "links": [{"id": i, "a": i, "b": i + 1, "length_km": length} for i, length in enumerate(lengths)],
        },
        fs_total=fs_total,
    )


class RandomInstance:
    """Up to 3 VONs on a line of up to 4 links with 6 FSs per link, one slot."""

    FS_TOTAL = 6

    def __init__(self, rng):
        link_count = int(rng.integers(1, 5))
        self.topology = line_topology([int(rng.integers(1, 10)) * 100 for _ in range(link_count)], self.FS_TOTAL)
        self.spectrum = SpectrumState(link_count, self.FS_TOTAL, debug=True)
        self.vons = []
        offered = {}
        next_id = 0
        for von_id in range(int(rng.integers(2, 4))):
            vlinks = []
            for _ in range(int(rng.integers(1, 3))):
                i = int(rng.integers(0, link_count))
                j = int(rng.integers(i + 1, link_count + 1))
                route = tuple(range(i, j))
                width = int(rng.integers(1, 3))
                start = first_fit_block(self.spectrum.occupancy(route), von_id, width)
                if start is None:
                    continue
                block = tuple(range(start, start + width))
                self.spectrum.assign(route, block, von_id)
                vlink = make_vlink(self.topology, next_id, von_id, (i, j), route, block, (2 * next_id, 2 * next_id + 1))
                need = int(rng.integers(0, width + 3))
                capacity = vlink.modulation.fs_capacity_gbps
                offered[next_id] = (need * capacity - capacity / 2 if need else 0.0,)
                vlinks.append(vlink)
                next_id += 1
            self.vons.append(Von(von_id, (), tuple(vlinks)))
        self.demands = SlotDemand(offered, 1)
        self.credits = {von.id: int(rng.integers(-3, 4)) * 500_000 for von in self.vons}

    def ledger(self, threshold_mu=-1.0):
        ledger = CreditLedger(self.credits, threshold_mu)
        for von, units in self.credits.items():
            ledger.set_units(von, units)
        return ledger


# trading rule variants exercised against the random instances
MARKETS = {
    "vcat": {},
    "contiguous": {"vcat_mode": False},
    "same-endpoints": {"trading_scope": "same_endpoints"},
    "contiguous-same-endpoints": {"vcat_mode": False, "trading_scope": "same_endpoints"},
    "opt-out": {"members": frozenset({0, 1})},
}


def trade_key(trade):
    return (
        trade.serial,
        trade.rc,
        trade.rc_vlink,
        tuple((c.tc, c.grants, c.credit_units) for c in trade.contributions),
    )
