import json
import logging
import os
from datetime import datetime
from typing import Dict, List, Optional

from sqlalchemy import Column, DateTime, Integer, String, Text, create_engine
from sqlalchemy.orm import declarative_base, sessionmaker

logger = logging.getLogger(__name__)

CATALOG_FILE = "catalog.db"

Base = declarative_base()


class LogSpecRow(Base):
    __tablename__ = "log_specs"

    log_id = Column(Integer, primary_key=True)
    path = Column(String, unique=True, index=True)
    fs_kind = Column(String)
    locator = Column(Text)  # JSON
    initial_size = Column(Integer, default=0)
    created_at = Column(DateTime, default=datetime.utcnow)

    def __repr__(self):
        return f"<LogSpecRow(log_id={self.log_id}, path='{self.path}', fs_kind='{self.fs_kind}')>"


class Incident(Base):
    __tablename__ = "incidents"

    id = Column(Integer, primary_key=True, index=True)
    kind = Column(String, index=True)
    severity = Column(String)
    seq = Column(Integer, nullable=True)
    log_id = Column(Integer, nullable=True)
    description = Column(Text)
    ranges = Column(Text, nullable=True)  # JSON list of [start, end)
    policy_action = Column(String, nullable=True)
    sealed = Column(Integer, default=0)
    created_at = Column(DateTime, default=datetime.utcnow)

    def __repr__(self):
        return f"<Incident(id={self.id}, kind='{self.kind}', seq={self.seq})>"


class ServeSession(Base):
    __tablename__ = "serve_sessions"

    id = Column(Integer, primary_key=True, index=True)
    listen = Column(String)
    engine_mode = Column(String)
    started_at = Column(DateTime, default=datetime.utcnow)
    stopped_at = Column(DateTime, nullable=True)
    committed_sizes = Column(Text, nullable=True)  # JSON {log_id: size}
    outcome = Column(String, nullable=True)


class Catalog:
    """SQLite bookkeeping for one seal store (log specs, incidents, sessions)"""

    def __init__(self, store_path: str):
        self.path = os.path.join(store_path, CATALOG_FILE)
        # SQLite requires check_same_thread=False (engine threads share it)
        self.engine = create_engine(f"sqlite:///{self.path}", connect_args={"check_same_thread": False})
        self.SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=self.engine)
        Base.metadata.create_all(bind=self.engine)

    def close(self):
        self.engine.dispose()

    def save_log_specs(self, specs: List[Dict]):
        db = self.SessionLocal()
        try:
            for spec in specs:
                db.merge(LogSpecRow(
                    log_id=spec["log_id"],
                    path=spec["path"],
                    fs_kind=spec["fs_kind"],
                    locator=json.dumps(spec["locator"]),
                    initial_size=spec.get("initial_size", 0),
                ))
            db.commit()
            logger.info(f"📇 Catalog stored {len(specs)} log spec(s)")
        except Exception:
            db.rollback()
            raise
        finally:
            db.close()

    def load_log_specs(self) -> List[Dict]:
        db = self.SessionLocal()
        try:
            rows = db.query(LogSpecRow).order_by(LogSpecRow.log_id).all()
            return [
                {
                    "log_id": row.log_id,
                    "path": row.path,
                    "fs_kind": row.fs_kind,
                    "locator": json.loads(row.locator),
                    "initial_size": row.initial_size,
                }
                for row in rows
            ]
        finally:
            db.close()

    def record_incident(self, indicator, policy_action: Optional[str] = None, sealed: bool = False) -> int:
        db = self.SessionLocal()
        try:
            row = Incident(
                kind=indicator.kind.value,
                severity=indicator.severity.value,
                seq=indicator.seq,
                log_id=indicator.log_id,
                description=indicator.description,
                ranges=json.dumps([list(r) for r in indicator.ranges]),
                policy_action=policy_action,
                sealed=1 if sealed else 0,
            )
            db.add(row)
            db.commit()
            db.refresh(row)
            return row.id
        except Exception as e:
            db.rollback()
            logger.error(f"❌ Could not record incident in catalog: {e}")
            return -1
        finally:
            db.close()

    def incidents(self) -> List[Incident]:
        db = self.SessionLocal()
        try:
            return db.query(Incident).order_by(Incident.id).all()
        finally:
            db.close()

    def start_session(self, listen: str, engine_mode: str) -> int:
        db = self.SessionLocal()
        try:
            session = ServeSession(listen=listen, engine_mode=engine_mode)
            db.add(session)
            db.commit()
            db.refresh(session)
            return session.id
        finally:
            db.close()

    def end_session(self, session_id: int, committed_sizes: Dict[int, int], outcome: str):
        db = self.SessionLocal()
        try:
            session = db.get(ServeSession, session_id)
            if session is None:
                logger.warning(f"⚠️ Serve session {session_id} not found in catalog")
                return
            session.stopped_at = datetime.utcnow()
            session.committed_sizes = json.dumps({str(k): v for k, v in committed_sizes.items()})
            session.outcome = outcome
            db.commit()
        finally:
            db.close()

    def sessions(self) -> List[ServeSession]:
        db = self.SessionLocal()
        try:
            return db.query(ServeSession).order_by(ServeSession.id).all()
        finally:
            db.close()
