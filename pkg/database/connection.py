import logging
import os
from contextlib import contextmanager
from functools import lru_cache
from typing import Iterator, Optional

from dotenv import load_dotenv
from sqlalchemy import create_engine
from sqlalchemy.engine import Engine
from sqlalchemy.orm import Session, sessionmaker

from schemas.config import data_root

from .models import Base

load_dotenv()

logger = logging.getLogger(__name__)


def database_url() -> str:
    """``OW4D_DATABASE_URL`` or a sqlite file under the data root."""
    url = os.getenv("OW4D_DATABASE_URL")
    if url:
        return url
    root = data_root()
    root.mkdir(parents=True, exist_ok=True)
    return f"sqlite:///{(root / 'runs.db').as_posix()}"


@lru_cache(maxsize=None)
def get_engine(url: Optional[str] = None) -> Engine:
    url = url or database_url()
    echo = os.getenv("OW4D_DB_ECHO", "").lower() in ("1", "true", "yes")
    logger.debug("opening run registry %s", url)
    return create_engine(url, echo=echo, future=True)


def session_factory(url: Optional[str] = None) -> sessionmaker:
    return sessionmaker(bind=get_engine(url), autocommit=False, autoflush=False, expire_on_commit=False)


@contextmanager
def get_sync_db(url: Optional[str] = None) -> Iterator[Session]:
    """Session that is always closed; callers commit through the crud helpers."""
    db = session_factory(url)()
    try:
        yield db
    finally:
        db.close()


def create_tables(url: Optional[str] = None) -> None:
    """Create the registry tables if they do not exist yet."""
    Base.metadata.create_all(get_engine(url))
