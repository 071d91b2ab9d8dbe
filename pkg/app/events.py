"""Pipeline event log: one JSON object per line in ``<log_dir>/events.jsonl``."""

from __future__ import annotations

import json
import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

from app.config import get_settings

logger = logging.getLogger(__name__)

EVENTS_FILE = "events.jsonl"


def log_event(event: str, **fields: Any) -> None:
    """Append a timestamped entry for ``event`` under the configured log dir."""
    log_dir = Path(get_settings().log_dir)
    log_dir.mkdir(parents=True, exist_ok=True)

    entry = {"timestamp": datetime.now(timezone.utc).isoformat(), "event": event, **fields}
    with open(log_dir / EVENTS_FILE, "a", encoding="utf-8") as f:
        f.write(json.dumps(entry, ensure_ascii=False, default=str) + "\n")

    logger.debug("Event logged: %s", event)
