"""Named random substreams derived from one master seed.

A substream is keyed by (purpose, FS assignment, replication, extra ids) and
never by the threshold mu, so every point of a mu sweep sees the same VONs
and demands, and adding sweep points never shifts existing ones.
"""
import numpy as np

PURPOSES = {
    "embedding": 1,
    "demand": 2,
    "replication": 3,
}


class SeedPlan:
    def __init__(self, master_seed: int):
        if master_seed < 0:
            raise ValueError("master seed must be nonnegative")
        self.master_seed = master_seed

    def sequence(self, purpose: str, fs_per_vlink: int, replication: int, *extra: int) -> np.random.SeedSequence:
        try:
            tag = PURPOSES[purpose]
        except KeyError:
            raise ValueError(f"unknown substream purpose {purpose!r}") from None
        return np.random.SeedSequence(self.master_seed, spawn_key=(tag, fs_per_vlink, replication, *extra))

    def generator(self, purpose: str, fs_per_vlink: int, replication: int, *extra: int) -> np.random.Generator:
        return np.random.default_rng(self.sequence(purpose, fs_per_vlink, replication, *extra))

    def replication_seed(self, fs_per_vlink: int, replication: int) -> int:
        """A 64-bit label for the report identifying one (point, replication) pair."""
        return int(self.sequence("replication", fs_per_vlink, replication).generate_state(1, np.uint64)[0])
