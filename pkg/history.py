"""
Run-history ledger: one row per CLI invocation, stored with SQLAlchemy.

The ledger is opt-in (``--db URL`` or ``GFMP_DATABASE_URL``); the JSON
manifest written next to the outputs is the primary record.
"""

import json
import logging
from datetime import datetime

from sqlalchemy import create_engine, event, Column, Integer, String, Float, DateTime, Text, Index, desc
from sqlalchemy.orm import declarative_base, sessionmaker

logger = logging.getLogger(__name__)

Base = declarative_base()

DEFAULT_DATABASE_URL = 'sqlite:///gfmp_runs.db'


class RunRecord(Base):
    """Model for one gfmp subcommand invocation."""

    __tablename__ = 'gfmp_runs'

    id = Column(Integer, primary_key=True)

    subcommand = Column(String(32), nullable=False, index=True)
    started_at = Column(DateTime, nullable=False, default=datetime.utcnow, index=True)
    duration_s = Column(Float, nullable=False)
    tool_version = Column(String(20), nullable=False)

    # JSON blobs: resolved config snapshot, output file list, report summary
    config_json = Column(Text, nullable=False)
    outputs_json = Column(Text, nullable=False)
    summary_json = Column(Text, nullable=True)

    exit_code = Column(Integer, nullable=False, default=0)

    __table_args__ = (
        Index('ix_gfmp_runs_subcommand_started', 'subcommand', 'started_at'),
    )

    def to_dict(self):
        return {
            'id': self.id,
            'subcommand': self.subcommand,
            'started_at': self.started_at.isoformat(),
            'duration_s': self.duration_s,
            'tool_version': self.tool_version,
            'config': json.loads(self.config_json),
            'outputs': json.loads(self.outputs_json),
            'summary': json.loads(self.summary_json) if self.summary_json else None,
            'exit_code': self.exit_code,
        }

    def __repr__(self):
        return f"<RunRecord(id={self.id}, subcommand='{self.subcommand}', started={self.started_at}, exit={self.exit_code})>"


def get_db_engine(database_url=DEFAULT_DATABASE_URL):
    """
    Create and return a database engine.

    Args:
        database_url: SQLAlchemy URL. SQLite by default; any other backend
                      works once its driver is installed.

    Returns:
        SQLAlchemy engine instance
    """
    engine = create_engine(database_url, echo=False)

    # WAL mode for SQLite so a running scan and `gfmp history` can share the file
    if database_url.startswith('sqlite'):

        @event.listens_for(engine, "connect")
        def set_sqlite_pragma(dbapi_connection, connection_record):
            cursor = dbapi_connection.cursor()
            cursor.execute("PRAGMA journal_mode=WAL")
            cursor.execute("PRAGMA synchronous=NORMAL")
            cursor.close()

    return engine


_engine_cache = {}
_session_factory_cache = {}


def init_db(database_url=DEFAULT_DATABASE_URL):
    """
    Create the ledger tables if needed. Engines are cached per URL.

    Returns:
        Tuple of (engine, SessionLocal)
    """
    if database_url in _engine_cache:
        return _engine_cache[database_url], _session_factory_cache[database_url]

    engine = get_db_engine(database_url)
    Base.metadata.create_all(engine)
    SessionLocal = sessionmaker(bind=engine)

    _engine_cache[database_url] = engine
    _session_factory_cache[database_url] = SessionLocal

    return engine, SessionLocal


def get_session(database_url=DEFAULT_DATABASE_URL):
    _, SessionLocal = init_db(database_url)
    return SessionLocal()


def record_run(manifest, summary=None, exit_code=0, database_url=DEFAULT_DATABASE_URL):
    """
    Store a run manifest in the ledger.

    Args:
        manifest: dict with subcommand, started_at (ISO string), duration_s,
                  tool_version, config and outputs
        summary: optional JSON-serializable report summary
        exit_code: process exit code of the run

    Returns:
        int: id of the new row
    """
    session = get_session(database_url)

    try:
        record = RunRecord(
            subcommand=manifest['subcommand'],
            started_at=datetime.fromisoformat(manifest['started_at']),
            duration_s=float(manifest['duration_s']),
            tool_version=manifest['tool_version'],
            config_json=json.dumps(manifest['config'], sort_keys=True),
            outputs_json=json.dumps(manifest['outputs']),
            summary_json=json.dumps(summary, sort_keys=True) if summary is not None else None,
            exit_code=int(exit_code),
        )
        session.add(record)
        session.commit()
        logger.info(f"Recorded run {record.id} ({record.subcommand}) in {database_url}")
        return record.id

    except Exception:
        session.rollback()
        raise

    finally:
        session.close()


def list_runs(limit=10, database_url=DEFAULT_DATABASE_URL, subcommand=None):
    """Most recent runs first, as dicts."""
    session = get_session(database_url)

    try:
        query = session.query(RunRecord)
        if subcommand:
            query = query.filter(RunRecord.subcommand == subcommand)
        rows = query.order_by(desc(RunRecord.started_at), desc(RunRecord.id)).limit(limit).all()
        return [row.to_dict() for row in rows]

    finally:
        session.close()


def get_run(run_id, database_url=DEFAULT_DATABASE_URL):
    """Return one run as a dict, or None if the id is unknown."""
    session = get_session(database_url)

    try:
        row = session.get(RunRecord, run_id)
        return row.to_dict() if row else None

    finally:
        session.close()
