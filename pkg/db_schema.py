"""
Run registry schema and setup for the FedHAR simulator
"""
import json
import logging
import os
from datetime import datetime, timezone

from sqlalchemy import Column, DateTime, Float, ForeignKey, Index, Integer, String, Text, create_engine
from sqlalchemy.orm import declarative_base, relationship, sessionmaker

from config import REGISTRY_URL

logger = logging.getLogger(__name__)

Base = declarative_base()


class ExperimentRun(Base):
    """One executed experiment arm"""
    __tablename__ = 'experiment_runs'

    id = Column(Integer, primary_key=True)
    arm = Column(String(50), nullable=False)
    seed = Column(Integer, nullable=False)
    output_dir = Column(Text)
    code_version = Column(String(20))
    rounds = Column(Integer, default=0)
    n_clients = Column(Integer, default=0)
    model_bytes = Column(Integer, default=0)
    macro_f1 = Column(Float)
    per_dataset_json = Column(Text)  # {tag: macro_f1}
    config_json = Column(Text)
    status = Column(String(20), default='completed')
    created_at = Column(DateTime, default=lambda: datetime.now(timezone.utc))

    # Relationships
    round_metrics = relationship("RoundMetric", back_populates="run", cascade="all, delete-orphan")

    __table_args__ = (
        Index('idx_runs_arm', 'arm'),
        Index('idx_runs_created', 'created_at'),
    )

    def __repr__(self):
        return f"<ExperimentRun(id={self.id}, arm='{self.arm}', seed={self.seed})>"


class RoundMetric(Base):
    """Per-round telemetry of a federated pre-training run"""
    __tablename__ = 'round_metrics'

    id = Column(Integer, primary_key=True)
    run_id = Column(Integer, ForeignKey('experiment_runs.id'), nullable=False)
    round = Column(Integer, nullable=False)
    client_loss_mean = Column(Float)
    client_loss_std = Column(Float)
    server_loss = Column(Float)
    bytes_down = Column(Integer, default=0)
    bytes_up = Column(Integer, default=0)

    run = relationship("ExperimentRun", back_populates="round_metrics")

    __table_args__ = (
        Index('idx_round_metrics_run', 'run_id', 'round'),
    )


def registry_url(output_dir):
    """FEDHAR_REGISTRY_URL if set, else a SQLite file inside the output directory"""
    if REGISTRY_URL:
        return REGISTRY_URL
    return f"sqlite:///{os.path.abspath(os.path.join(output_dir, 'experiments.db'))}"


def init_database(url):
    """Initialize database and create tables"""
    engine = create_engine(url)
    Base.metadata.create_all(engine)
    logger.debug(f"Registry tables ready at {url}")
    return engine


def get_session(url):
    """Get database session"""
    engine = init_database(url)
    Session = sessionmaker(bind=engine)
    return Session()


def _nan_to_none(value):
    return None if value is None or value != value else float(value)


def record_run(url, cfg, report, records=(), model_bytes=0, n_clients=0):
    """
    Store a finished run and its round telemetry.

    Args:
        url: SQLAlchemy database URL
        cfg: ExperimentConfig of the run
        report: EvalReport dict as written to report.json
        records: RoundRecord list (fl_ae arm)

    Returns:
        int: id of the new run row
    """
    session = get_session(url)
    try:
        run = ExperimentRun(
            arm=cfg.arm,
            seed=cfg.seed,
            output_dir=os.path.abspath(cfg.output_dir),
            code_version=report.get("metadata", {}).get("code_version"),
            rounds=len(records),
            n_clients=n_clients,
            model_bytes=model_bytes,
            macro_f1=report["combined"]["macro_f1"],
            per_dataset_json=json.dumps({tag: v["macro_f1"] for tag, v in report["per_dataset"].items()}),
            config_json=json.dumps(cfg.to_dict(), sort_keys=True),
        )
        for record in records:
            run.round_metrics.append(RoundMetric(
                round=record.round,
                client_loss_mean=_nan_to_none(record.client_loss_mean),
                client_loss_std=_nan_to_none(record.client_loss_std),
                server_loss=_nan_to_none(record.server_loss),
                bytes_down=record.bytes_down,
                bytes_up=record.bytes_up,
            ))
        session.add(run)
        session.commit()
        logger.info(f"Registered run {run.id} ({cfg.arm}) in {url}")
        return run.id
    except Exception as e:
        session.rollback()
        logger.error(f"Error recording run: {e}")
        raise
    finally:
        session.close()


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
    url = registry_url(os.getenv("FEDHAR_OUTPUT_DIR", "runs"))
    logger.info(f"Initializing run registry at {url}...")
    init_database(url)
