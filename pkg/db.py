"""
Database access layer for the run registry.
Provides save / load operations for runs and their trace rows.
"""
from __future__ import annotations

import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

from sqlalchemy import create_engine
from sqlalchemy.orm import Session, sessionmaker

from models import Base, RoundRecord, RunRecord
from round_trace import CSV_COLUMNS, RoundTrace

logger = logging.getLogger(__name__)

_engine = None
_SessionLocal = None
_db_path: Optional[str] = None

DEFAULT_DB = "fsl_runs.db"


def init_db(db_path: Union[str, Path] = DEFAULT_DB) -> None:
    """Initialize the database (create tables if needed)."""
    global _engine, _SessionLocal, _db_path
    if _engine is not None and _db_path == str(db_path):
        return
    if _engine is not None:
        _engine.dispose()
    _engine = create_engine(f"sqlite:///{db_path}", echo=False)
    Base.metadata.create_all(_engine)
    _SessionLocal = sessionmaker(bind=_engine)
    _db_path = str(db_path)


def get_session() -> Session:
    if _SessionLocal is None:
        init_db()
    return _SessionLocal()


# ------------------------------------------------------------------
# Writes
# ------------------------------------------------------------------

def save_run(meta: Dict[str, Any], traces: Sequence[RoundTrace]) -> None:
    """
    Insert or replace one run and its rows.

    ``meta`` carries the RunRecord columns; existing rows of the same run are
    replaced so re-running an experiment leaves one copy.
    """
    with get_session() as session:
        existing = session.get(RunRecord, meta["run_id"])
        if existing is not None:
            session.delete(existing)
            session.flush()
        session.add(RunRecord(**meta))
        session.flush()
        session.bulk_insert_mappings(
            RoundRecord, [_trace_to_mapping(meta["run_id"], tr) for tr in traces]
        )
        session.commit()
    logger.debug("registered run %s (%d rows)", meta["run_id"], len(traces))


def delete_run(run_id: str) -> None:
    with get_session() as session:
        record = session.get(RunRecord, run_id)
        if record:
            session.delete(record)
            session.commit()


# ------------------------------------------------------------------
# Reads
# ------------------------------------------------------------------

def load_runs(experiment: Optional[str] = None) -> List[Dict[str, Any]]:
    """Run metadata, ordered by run id."""
    with get_session() as session:
        query = session.query(RunRecord)
        if experiment is not None:
            query = query.filter(RunRecord.experiment == experiment)
        return [_record_to_meta(r) for r in query.order_by(RunRecord.run_id).all()]


def load_trace(run_id: str) -> List[RoundTrace]:
    with get_session() as session:
        rows = (
            session.query(RoundRecord)
            .filter(RoundRecord.run_id == run_id)
            .order_by(RoundRecord.round)
            .all()
        )
        return [_record_to_trace(r) for r in rows]


def run_exists(run_id: str) -> bool:
    with get_session() as session:
        return session.get(RunRecord, run_id) is not None


# ------------------------------------------------------------------
# Conversion helpers
# ------------------------------------------------------------------

_FLOAT_COLUMNS = [c for c in CSV_COLUMNS if c not in ("round", "params_digest", "drift_estimated")]


def _trace_to_mapping(run_id: str, tr: RoundTrace) -> Dict[str, Any]:
    mapping: Dict[str, Any] = {
        "run_id": run_id,
        "round": tr.round,
        "params_digest": tr.params_digest,
        "drift_estimated": tr.drift_estimated,
    }
    for name in _FLOAT_COLUMNS:
        value = getattr(tr, name)
        mapping[name] = None if math.isnan(value) else float(value)
    return mapping


def _record_to_trace(r: RoundRecord) -> RoundTrace:
    kwargs: Dict[str, Any] = {
        "round": r.round,
        "params_digest": r.params_digest or "",
        "drift_estimated": bool(r.drift_estimated),
    }
    for name in _FLOAT_COLUMNS:
        value = getattr(r, name)
        kwargs[name] = math.nan if value is None else value
    return RoundTrace(**kwargs)


def _record_to_meta(r: RunRecord) -> Dict[str, Any]:
    return {
        "run_id": r.run_id,
        "experiment": r.experiment,
        "algorithm": r.algorithm,
        "gamma": r.gamma,
        "seed": r.seed,
        "rounds": r.rounds,
        "config_json": r.config_json,
        "config_digest": r.config_digest,
        "trace_path": r.trace_path,
        "final_rolling_acc": r.final_rolling_acc,
        "rise_time": r.rise_time,
    }
