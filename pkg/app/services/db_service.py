from sqlalchemy import create_engine, Column, Integer, String, DateTime, Text
from sqlalchemy.orm import declarative_base, sessionmaker, Session
from datetime import datetime
from typing import Optional, List
import logging

Base = declarative_base()


class RunRecord(Base):
    __tablename__ = "run_history"

    id = Column(Integer, primary_key=True)
    subcommand = Column(String(50), nullable=False, index=True)
    status = Column(String(20), default="pending")  # pending, completed, failed
    run_dir = Column(Text)
    resolved_config = Column(Text)
    exit_code = Column(Integer)
    created_at = Column(DateTime, default=datetime.utcnow)
    completed_at = Column(DateTime)
    error_message = Column(Text)


class DatabaseService:
    """SQLAlchemy-backed registry of CLI runs"""

    def __init__(self, database_url: str):
        self.engine = create_engine(database_url)
        self.SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=self.engine)
        self.logger = logging.getLogger(__name__)

        # Create tables
        Base.metadata.create_all(bind=self.engine)

    def get_session(self) -> Session:
        """Get database session"""
        return self.SessionLocal()

    def create_run_record(self, subcommand: str, run_dir: str, resolved_config: str) -> int:
        """Create run history record"""
        with self.get_session() as session:
            record = RunRecord(
                subcommand=subcommand,
                run_dir=run_dir,
                resolved_config=resolved_config
            )
            session.add(record)
            session.commit()
            session.refresh(record)
            self.logger.debug(f"Created run record {record.id} for {subcommand}")
            return record.id

    def update_run_record(self, record_id: int, status: str,
                          exit_code: Optional[int] = None, error_message: Optional[str] = None) -> bool:
        """Update run history record"""
        with self.get_session() as session:
            record = session.query(RunRecord).filter(RunRecord.id == record_id).first()
            if not record:
                return False
            record.status = status
            if exit_code is not None:
                record.exit_code = exit_code
            if error_message:
                record.error_message = error_message
            if status in ("completed", "failed"):
                record.completed_at = datetime.utcnow()
            session.commit()
            return True

    def get_run(self, record_id: int) -> Optional[RunRecord]:
        """Get a run by id"""
        with self.get_session() as session:
            return session.query(RunRecord).filter(RunRecord.id == record_id).first()

    def recent_runs(self, limit: int = 20, subcommand: Optional[str] = None) -> List[RunRecord]:
        """Most recent runs, newest first"""
        with self.get_session() as session:
            query = session.query(RunRecord)
            if subcommand:
                query = query.filter(RunRecord.subcommand == subcommand)
            return query.order_by(RunRecord.id.desc()).limit(limit).all()
