"""Run manifest writer."""

import hashlib
import logging
from collections.abc import Iterable
from datetime import datetime
from pathlib import Path

from sgdfuse.core.checkpoint import content_hash
from sgdfuse.models.manifest import RunManifest

logger = logging.getLogger(__name__)

RUNS_LOG = "runs.jsonl"


def outputs_hash(paths: Iterable[Path], root: Path | None = None) -> str:
    """Combined hash over (relative name, content hash) of every output, in name order."""
    h = hashlib.sha256()
    entries = []
    for path in paths:
        name = path.relative_to(root).as_posix() if root is not None else path.name
        entries.append((name, content_hash(path)))
    for name, digest in sorted(entries):
        h.update(f"{name}\0{digest}\n".encode())
    return h.hexdigest()


class ManifestWriter:
    """Writes one JSON file per run and appends it to a JSONL log.

    Args:
        manifest_dir: Directory holding the manifests.
    """

    def __init__(self, manifest_dir: Path) -> None:
        self.manifest_dir = manifest_dir
        self.log_path = manifest_dir / RUNS_LOG
        self._ensure_log_file()

    def _ensure_log_file(self) -> None:
        self.manifest_dir.mkdir(parents=True, exist_ok=True)
        if not self.log_path.exists():
            self.log_path.touch()

    def write(self, manifest: RunManifest) -> Path:
        """Persist ``manifest`` and return the path of its JSON file."""
        stamp = manifest.started_at.strftime("%Y%m%dT%H%M%S%fZ")
        path = self.manifest_dir / f"{manifest.command}-{stamp}.json"
        path.write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
        with self.log_path.open("a", encoding="utf-8") as f:
            f.write(manifest.model_dump_json() + "\n")
        logger.info(f"Wrote run manifest {path}")
        return path

    def read_all(self, command: str | None = None, since: datetime | None = None) -> list[RunManifest]:
        """Manifests from the JSONL log, optionally filtered."""
        runs: list[RunManifest] = []
        with self.log_path.open("r", encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                run = RunManifest.model_validate_json(line)
                if command and run.command != command:
                    continue
                if since and run.started_at < since:
                    continue
                runs.append(run)
        return runs
