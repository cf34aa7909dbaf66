import json
import logging
import os
from datetime import datetime
from typing import TYPE_CHECKING, Optional

from sqlalchemy import Boolean, Column, DateTime, Float, ForeignKey, Integer, String, Text, create_engine
from sqlalchemy.orm import declarative_base, relationship, sessionmaker
from sqlalchemy.pool import StaticPool

from models.schemas import ChainSummary, RunConfig, RunReport

if TYPE_CHECKING:
    from trading.chain import Chain

logger = logging.getLogger(__name__)

SQLALCHEMY_DATABASE_URL = os.getenv("SPECTRUM_DB_URL", "sqlite:///./spectrum_trading.db")


def make_engine(url: str):
    kwargs = {}
    if url.startswith("sqlite"):
        kwargs["connect_args"] = {"check_same_thread": False}
        if url in ("sqlite://", "sqlite:///:memory:"):
            # one shared connection, otherwise every session sees an empty database
            kwargs["poolclass"] = StaticPool
    return create_engine(url, **kwargs)


engine = make_engine(SQLALCHEMY_DATABASE_URL)
SessionLocal = sessionmaker(autoflush=False, expire_on_commit=False, bind=engine)

Base = declarative_base()


# Table: one experiment run
class DBRun(Base):
    __tablename__ = "runs"

    id = Column(Integer, primary_key=True, index=True)
    status = Column(String, default="pending", index=True)  # pending, running, finished, failed
    sweep = Column(String, nullable=False)
    mode = Column(String, nullable=False)
    # seeds are u64 and do not fit SQLite's signed INTEGER
    seed = Column(String, nullable=False)
    config_json = Column(Text, nullable=False)
    report_json = Column(Text)
    error = Column(String)
    total_rows = Column(Integer, default=0)
    created_at = Column(DateTime, default=datetime.utcnow)
    finished_at = Column(DateTime)

    rows = relationship("DBSimulationRow", back_populates="run", cascade="all, delete-orphan")
    blocks = relationship("DBBlockHeader", back_populates="run", cascade="all, delete-orphan")


# Table: one (point, replication, mode) simulation
class DBSimulationRow(Base):
    __tablename__ = "simulation_rows"

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey("runs.id"), index=True)
    sweep = Column(String)
    fs_per_vlink = Column(Integer)
    threshold_mu = Column(Float)
    replication = Column(Integer)
    mode = Column(String, index=True)
    seed = Column(String)
    feasible = Column(Boolean, default=True)
    offered_gbps = Column(Float)
    carried_gbps = Column(Float)
    blocked_gbps = Column(Float)
    improvement_pct = Column(Float)
    trades = Column(Integer)
    traded_fs = Column(Integer)
    embed_retries = Column(Integer)
    blocks = Column(Integer)
    rejected_blocks = Column(Integer)
    chain_tip = Column(String)
    credit_sum_units = Column(Integer)
    messages = Column(Integer)
    reconfig_ms = Column(Float)

    run = relationship("DBRun", back_populates="rows")


# Table: committed block headers (the trading record)
class DBBlockHeader(Base):
    __tablename__ = "block_headers"

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey("runs.id"), index=True)
    fs_per_vlink = Column(Integer)
    threshold_mu = Column(Float)
    replication = Column(Integer)
    height = Column(Integer)
    slot_index = Column(Integer)
    creator_id = Column(Integer)
    prev_hash = Column(String(64))
    block_hash = Column(String(64), index=True)
    transactions = Column(Integer)

    run = relationship("DBRun", back_populates="blocks")


# Create every table
Base.metadata.create_all(bind=engine)


# CRUD for runs
def create_run(config: RunConfig, sweep: str, mode: str) -> DBRun:
    db = SessionLocal()
    try:
        db_run = DBRun(
            status="pending",
            sweep=sweep,
            mode=mode,
            seed=str(config.seed),
            config_json=config.model_dump_json(),
        )
        db.add(db_run)
        db.commit()
        db.refresh(db_run)
        return db_run
    except Exception:
        db.rollback()
        raise
    finally:
        db.close()


def set_run_status(run_id: int, status: str, error: Optional[str] = None):
    db = SessionLocal()
    try:
        db_run = db.get(DBRun, run_id)
        if db_run is None:
            raise ValueError(f"run {run_id} does not exist")
        db_run.status = status
        db_run.error = error
        if status in ("finished", "failed"):
            db_run.finished_at = datetime.utcnow()
        db.commit()
    except Exception:
        db.rollback()
        raise
    finally:
        db.close()


def save_report(run_id: int, report: RunReport):
    """Store the report's rows and JSON echo and mark the run finished."""
    db = SessionLocal()
    try:
        db_run = db.get(DBRun, run_id)
        if db_run is None:
            raise ValueError(f"run {run_id} does not exist")
        for row in report.rows:
            data = row.model_dump()
            data["seed"] = str(data["seed"])
            db.add(DBSimulationRow(run_id=run_id, **data))
        db_run.report_json = report.model_dump_json()
        db_run.total_rows = len(report.rows)
        db_run.status = "finished"
        db_run.finished_at = datetime.utcnow()
        db.commit()
        logger.info("✅ run %d stored with %d rows", run_id, len(report.rows))
    except Exception:
        db.rollback()
        raise
    finally:
        db.close()


def save_block_headers(run_id: int, summary: ChainSummary, chain: "Chain") -> int:
    db = SessionLocal()
    try:
        for height, block in enumerate(chain.blocks):
            db.add(
                DBBlockHeader(
                    run_id=run_id,
                    fs_per_vlink=summary.fs_per_vlink,
                    threshold_mu=summary.threshold_mu,
                    replication=summary.replication,
                    height=height,
                    slot_index=block.slot_index,
                    creator_id=block.creator_id,
                    prev_hash=block.header_prev_hash.hex(),
                    block_hash=block.block_hash.hex(),
                    transactions=len(block.transactions),
                )
            )
        db.commit()
        return len(chain.blocks)
    except Exception:
        db.rollback()
        raise
    finally:
        db.close()


# Queries
def get_run(run_id: int) -> Optional[DBRun]:
    db = SessionLocal()
    try:
        return db.get(DBRun, run_id)
    finally:
        db.close()


def list_runs(skip: int = 0, limit: int = 100, status: Optional[str] = None):
    db = SessionLocal()
    try:
        query = db.query(DBRun)
        if status:
            query = query.filter(DBRun.status == status)
        return query\
                .order_by(DBRun.id.desc())\
                .offset(skip)\
                .limit(limit)\
                .all()
    finally:
        db.close()


def get_run_rows(run_id: int, mode: Optional[str] = None):
    db = SessionLocal()
    try:
        query = db.query(DBSimulationRow).filter(DBSimulationRow.run_id == run_id)
        if mode:
            query = query.filter(DBSimulationRow.mode == mode)
        return query.order_by(DBSimulationRow.id).all()
    finally:
        db.close()


def get_run_blocks(run_id: int):
    db = SessionLocal()
    try:
        return db.query(DBBlockHeader)\
                .filter(DBBlockHeader.run_id == run_id)\
                .order_by(DBBlockHeader.fs_per_vlink, DBBlockHeader.threshold_mu,
                          DBBlockHeader.replication, DBBlockHeader.height)\
                .all()
    finally:
        db.close()


def run_report(db_run: DBRun) -> Optional[RunReport]:
    if not db_run.report_json:
        return None
    return RunReport.model_validate(json.loads(db_run.report_json))
