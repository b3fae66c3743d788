"""Artifact writing: byte-stable JSON/CSV plus a timestamped sidecar per artifact."""

import csv
import json
import logging
import os
from datetime import datetime, timezone
from typing import Iterable, Optional, Sequence

logger = logging.getLogger(__name__)


def meta_path(path: str) -> str:
    root, _ = os.path.splitext(path)
    return f"{root}.meta.json"


def artifact_path(out_dir: str, name: str, seed: Optional[int] = None, ext: str = "json") -> str:
    stem = name if seed is None else f"{name}_seed{seed}"
    return os.path.join(out_dir, f"{stem}.{ext}")


def _write_sidecar(path: str, config_digest: str, wall_time_ms: Optional[float]) -> None:
    meta = {
        "artifact": os.path.basename(path),
        "config_digest": config_digest,
        "created_at": datetime.now(timezone.utc).isoformat(),
        "wall_time_ms": wall_time_ms,
    }
    with open(meta_path(path), "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")


def write_json(path: str, payload: dict, config_digest: str, wall_time_ms: Optional[float] = None) -> str:
    """Writes ``payload`` stamped with the config digest; timestamps go to the sidecar only."""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    body = dict(payload)
    body["config_digest"] = config_digest
    with open(path, "w") as f:
        json.dump(body, f, indent=2, sort_keys=True)
        f.write("\n")
    _write_sidecar(path, config_digest, wall_time_ms)
    logger.debug("wrote %s", path)
    return path


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence], config_digest: str,
              wall_time_ms: Optional[float] = None) -> str:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(list(header) + ["config_digest"])
        for row in rows:
            writer.writerow(list(row) + [config_digest])
    _write_sidecar(path, config_digest, wall_time_ms)
    logger.debug("wrote %s", path)
    return path

