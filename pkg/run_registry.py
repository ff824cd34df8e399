"""Run registry: caches trained cells so ``compare`` can skip finished runs."""
import logging
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Optional

import pandas as pd
from sqlalchemy import (
    Column,
    DateTime,
    Float,
    Integer,
    MetaData,
    String,
    Table,
    create_engine,
    delete,
    func,
    insert,
    select,
    update,
)
from sqlalchemy.exc import SQLAlchemyError

logger = logging.getLogger(__name__)


class RunRegistry:
    """
    Results cache for experiment cells, keyed by the run-config hash.
    Stores where each run lives and the numbers the comparison table reports.
    """

    def __init__(self, db_path: Path):
        """
        Open (or create) the registry database.

        Args:
            db_path: Path to the SQLite registry file
        """
        self.db_path = Path(db_path)
        self.db_path.parent.mkdir(parents=True, exist_ok=True)
        self.engine = create_engine(f"sqlite:///{self.db_path}", echo=False)
        self.metadata = MetaData()
        self.runs = Table(
            "runs", self.metadata,
            Column("run_id", Integer, primary_key=True, autoincrement=True),
            Column("config_hash", String(32), nullable=False, unique=True),
            Column("model_tag", String(128), nullable=False),
            Column("dataset", String(32), nullable=False),
            Column("variant", String(16), nullable=False),
            Column("num_glimpses", Integer),
            Column("num_scales", Integer),
            Column("param_count", Integer, nullable=False),
            Column("ms_per_image", Float),
            Column("test_accuracy", Float),
            Column("best_val_accuracy", Float),
            Column("epochs", Integer),
            Column("run_dir", String(512), nullable=False),
            Column("checkpoint", String(512)),
            Column("created_at", DateTime, default=datetime.now),
            Column("last_accessed_at", DateTime, default=datetime.now),
            Column("access_count", Integer, default=0),
        )
        self.hits = 0
        self.misses = 0
        try:
            self.metadata.create_all(self.engine)
        except SQLAlchemyError as e:
            logger.error(f"Failed to initialize run registry at {self.db_path}: {e}")
            raise
        logger.info(f"Run registry initialized at {self.db_path}")

    def get(self, config_hash: str) -> Optional[Dict[str, Any]]:
        """
        Look up a finished run.

        Args:
            config_hash: RunConfig.config_hash() of the cell

        Returns:
            Row as a dictionary, or None when the run is unknown or its
            checkpoint has disappeared
        """
        try:
            row = self._lookup(config_hash)
        except SQLAlchemyError as e:
            logger.error(f"Registry retrieval error: {e}")
            raise
        if row is None:
            return None
        self.hits += 1
        logger.info(f"Registry HIT for key: {config_hash} ({row['model_tag']})")
        return dict(row)

    def _lookup(self, config_hash: str):
        with self.engine.begin() as conn:
            row = conn.execute(select(self.runs).where(self.runs.c.config_hash == config_hash)).mappings().first()
            if row is None:
                logger.info(f"Registry MISS for key: {config_hash}")
                self.misses += 1
                return None
            if row["checkpoint"] and not Path(row["checkpoint"]).exists():
                logger.warning(f"Registry entry {config_hash} points at missing checkpoint {row['checkpoint']}")
                conn.execute(delete(self.runs).where(self.runs.c.config_hash == config_hash))
                self.misses += 1
                return None
            conn.execute(
                update(self.runs)
                .where(self.runs.c.config_hash == config_hash)
                .values(access_count=self.runs.c.access_count + 1, last_accessed_at=datetime.now())
            )
        return row

    def record(self, config_hash: str, model_tag: str, dataset: str, variant: str, param_count: int,
               run_dir: Path, checkpoint: Optional[Path] = None, ms_per_image: Optional[float] = None,
               test_accuracy: Optional[float] = None, best_val_accuracy: Optional[float] = None,
               epochs: Optional[int] = None, num_glimpses: Optional[int] = None,
               num_scales: Optional[int] = None) -> None:
        """Insert or replace the entry for ``config_hash``."""
        values = {
            "config_hash": config_hash,
            "model_tag": model_tag,
            "dataset": dataset,
            "variant": variant,
            "num_glimpses": num_glimpses,
            "num_scales": num_scales,
            "param_count": int(param_count),
            "ms_per_image": ms_per_image,
            "test_accuracy": test_accuracy,
            "best_val_accuracy": best_val_accuracy,
            "epochs": epochs,
            "run_dir": str(run_dir),
            "checkpoint": str(checkpoint) if checkpoint else None,
            "created_at": datetime.now(),
            "last_accessed_at": datetime.now(),
            "access_count": 0,
        }
        try:
            with self.engine.begin() as conn:
                conn.execute(delete(self.runs).where(self.runs.c.config_hash == config_hash))
                conn.execute(insert(self.runs).values(**values))
        except SQLAlchemyError as e:
            logger.error(f"Failed to record run {config_hash}: {e}")
            raise
        logger.info(f"Recorded run {config_hash} ({model_tag}, accuracy {test_accuracy})")

    def list_runs(self, dataset: Optional[str] = None) -> pd.DataFrame:
        """Registered runs, oldest first, optionally for one dataset."""
        query = select(self.runs).order_by(self.runs.c.created_at)
        if dataset:
            query = query.where(self.runs.c.dataset == dataset)
        try:
            with self.engine.connect() as conn:
                return pd.read_sql(query, conn)
        except SQLAlchemyError as e:
            logger.error(f"Failed to list registry entries: {e}")
            raise

    def clear_all(self) -> int:
        """Remove every entry; returns how many there were."""
        try:
            with self.engine.begin() as conn:
                count = conn.execute(select(func.count()).select_from(self.runs)).scalar() or 0
                conn.execute(delete(self.runs))
        except SQLAlchemyError as e:
            logger.error(f"Failed to clear registry: {e}")
            raise
        logger.info(f"Cleared {count} registry entries")
        return count

    def get_statistics(self) -> Dict[str, Any]:
        try:
            with self.engine.connect() as conn:
                total = conn.execute(select(func.count()).select_from(self.runs)).scalar() or 0
        except SQLAlchemyError as e:
            logger.error(f"Failed to get registry statistics: {e}")
            raise
        lookups = self.hits + self.misses
        return {
            "total_entries": total,
            "hits": self.hits,
            "misses": self.misses,
            "hit_rate": self.hits / lookups if lookups else 0.0,
        }

    def close(self):
        """Dispose of the database engine."""
        self.engine.dispose()
        logger.info("Run registry connection closed")
