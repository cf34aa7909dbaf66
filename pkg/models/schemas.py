from datetime import datetime
from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

Sweep = Literal["fs", "mu"]
Mode = Literal["st", "nonst"]


# === TOPOLOGY DOCUMENT ===
class NodeSpec(BaseModel):
    id: int = Field(..., ge=0, description="Dense node index 0..N-1")
    name: str = Field(..., min_length=1, description="Short label, unique in the topology")


class LinkSpec(BaseModel):
    id: int = Field(..., ge=0, description="Dense link index 0..L-1")
    a: int = Field(..., description="First endpoint node id")
    b: int = Field(..., description="Second endpoint node id")
    # positivity is checked by load_topology so the error names the link
    length_km: float = Field(..., description="Fiber length in km")


class TopologyDocument(BaseModel):
    nodes: List[NodeSpec]
    links: List[LinkSpec]


# === RUN CONFIG ===
class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    topology: str = Field("data/usnet.json", description="Path of the topology document")
    von_count: int = Field(50, gt=0)
    slots: int = Field(4, gt=0)
    fs_per_vlink: List[int] = Field(default_factory=lambda: [2, 4, 6, 8, 10], min_length=1)
    threshold_mu: float = Field(-30.0, description="Forbidden threshold on cumulative credit")
    mu_sweep: List[float] = Field(default_factory=lambda: [0.0, -10.0, -20.0, -30.0, -40.0, -50.0], min_length=1)
    mu_sweep_fs: List[int] = Field(default_factory=lambda: [4, 8], min_length=1)
    vcat_mode: bool = True
    guard_fs: int = Field(0, ge=0)
    fs_total: int = Field(358, gt=0)
    seed: int = Field(1, ge=0, lt=2**64)
    replications: int = Field(10, gt=0)
    k_paths: int = Field(3, gt=0)
    max_embed_retries: int = Field(50, ge=0)
    normalization: Literal["max", "fixed"] = "max"
    normalization_km: float = Field(1000.0, gt=0)
    creator_metric: Literal["credit", "fs"] = "credit"
    trading_scope: Literal["shared_link", "same_endpoints"] = "shared_link"
    opt_out_vons: List[int] = Field(default_factory=list)
    engine: Literal["protocol", "centralized"] = "protocol"
    reconfig_latency_ms: float = Field(0.0, ge=0)
    debug_audit: bool = False

    @field_validator("fs_per_vlink", "mu_sweep_fs")
    @classmethod
    def validate_fs_steps(cls, v):
        for fs in v:
            if fs <= 0 or fs % 2:
                raise ValueError("FS assignments must be positive and even")
        if len(set(v)) != len(v):
            raise ValueError("FS assignments must be distinct")
        return v

    @model_validator(mode="after")
    def validate_opt_outs(self):
        for von in self.opt_out_vons:
            if not 0 <= von < self.von_count:
                raise ValueError(f"opt-out VON {von} outside 0..{self.von_count - 1}")
        return self

    def members(self) -> Optional[frozenset]:
        """VONs that signed the trading agreement; None means every VON."""
        if not self.opt_out_vons:
            return None
        return frozenset(range(self.von_count)) - frozenset(self.opt_out_vons)


# === REPORT SCHEMAS ===
class SimulationRow(BaseModel):
    """One simulation: a (point, replication, mode) triple."""
    model_config = ConfigDict(from_attributes=True)

    sweep: Sweep
    fs_per_vlink: int
    threshold_mu: float
    replication: int
    mode: Mode
    seed: int
    feasible: bool = True
    offered_gbps: float = 0.0
    carried_gbps: float = 0.0
    blocked_gbps: float = 0.0
    improvement_pct: Optional[float] = None
    trades: int = 0
    traded_fs: int = 0
    embed_retries: int = 0
    blocks: int = 0
    rejected_blocks: int = 0
    chain_tip: Optional[str] = None
    credit_sum_units: int = 0
    messages: int = 0
    reconfig_ms: float = 0.0


class PointSummary(BaseModel):
    sweep: Sweep
    fs_per_vlink: int
    threshold_mu: float
    replications: int
    feasible: bool
    mean_improvement_pct: Optional[float] = None
    min_improvement_pct: Optional[float] = None
    max_improvement_pct: Optional[float] = None
    mean_carried_st: Optional[float] = None
    mean_carried_nonst: Optional[float] = None


class ChainSummary(BaseModel):
    fs_per_vlink: int
    threshold_mu: float
    replication: int
    blocks: int
    transactions: int
    tip_hash: Optional[str] = None
    verified: bool
    rejected_blocks: int = 0


class VonSpecOut(BaseModel):
    von_id: int
    node_map: List[int] = Field(..., description="Physical node of each virtual node")
    edges: List[List[int]] = Field(..., description="Virtual node pairs")


class ScenarioRecord(BaseModel):
    """The VONs drawn for one (FS assignment, replication) pair"""
    fs_per_vlink: int
    replication: int
    embed_retries: int = 0
    vons: List[VonSpecOut] = Field(default_factory=list)


class LedgerSnapshot(BaseModel):
    fs_per_vlink: int
    threshold_mu: float
    replication: int
    slot: int
    credit_units: Dict[int, int] = Field(..., description="VON id -> cumulative credit in 1e-6 units")


class RunReport(BaseModel):
    config: RunConfig
    seed: int
    sweep: Sweep
    modes: List[Mode]
    rows: List[SimulationRow] = Field(default_factory=list)
    points: List[PointSummary] = Field(default_factory=list)
    chains: List[ChainSummary] = Field(default_factory=list)
    scenarios: List[ScenarioRecord] = Field(default_factory=list)
    ledger_snapshots: List[LedgerSnapshot] = Field(default_factory=list)
    assumptions: List[str] = Field(default_factory=list)


# === CHAIN DUMP SCHEMAS ===
class TransactionOut(BaseModel):
    serial: int
    slot_index: int
    rc_id: int
    tc_id: int
    grants: List[List] = Field(..., description="[link index, [FS indices]] pairs")


class BlockOut(BaseModel):
    height: int
    prev_hash: str
    creator_id: int
    slot_index: int
    block_hash: str
    transactions: List[TransactionOut] = Field(default_factory=list)


class ChainDump(BaseModel):
    blocks: List[BlockOut] = Field(default_factory=list)


# === API SCHEMAS ===
class RunCreate(BaseModel):
    config: RunConfig = Field(default_factory=RunConfig)
    sweep: Sweep = "fs"
    mode: Literal["st", "nonst", "both"] = "both"


class RunSummary(BaseModel):
    model_config = ConfigDict(from_attributes=True)

    id: int
    status: str
    sweep: str
    mode: str
    seed: int
    created_at: datetime
    finished_at: Optional[datetime] = None
    total_rows: int = 0
    error: Optional[str] = None


class RunDetailed(RunSummary):
    """Run with its configuration echo and per-point statistics"""
    config: Optional[RunConfig] = None
    points: List[PointSummary] = Field(default_factory=list)
    chains: List[ChainSummary] = Field(default_factory=list)


class BlockHeader(BaseModel):
    model_config = ConfigDict(from_attributes=True)

    id: int
    run_id: int
    fs_per_vlink: int
    threshold_mu: float
    replication: int
    height: int
    slot_index: int
    creator_id: int
    prev_hash: str
    block_hash: str
    transactions: int

