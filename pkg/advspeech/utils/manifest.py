import hashlib
import json
import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Union

from pydantic import BaseModel

from advspeech.datatypes import ExperimentManifest

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"


def _plain(config: Union[BaseModel, dict]) -> dict:
    return config.dict() if isinstance(config, BaseModel) else dict(config)


def config_hash(config: Union[BaseModel, dict]) -> str:
    encoded = json.dumps(_plain(config), sort_keys=True, default=str).encode()
    return hashlib.sha256(encoded).hexdigest()


def file_sha256(path: Union[str, Path]) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def start_manifest(
    command: str,
    argv: List[str],
    config: Union[BaseModel, dict],
    seeds: Optional[Dict[str, int]] = None,
) -> ExperimentManifest:
    return ExperimentManifest(
        command=command,
        argv=list(argv),
        config_hash=config_hash(config),
        config=_plain(config),
        seeds=seeds or {},
        started_at=datetime.now(timezone.utc),
    )


def record_checkpoint(manifest: ExperimentManifest, label: str, path: Union[str, Path]):
    manifest.checkpoint_hashes[label] = file_sha256(path)


def write_manifest(manifest: ExperimentManifest, out_dir: Union[str, Path]) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest.finished_at = datetime.now(timezone.utc)
    path = out_dir / MANIFEST_FILE
    path.write_text(json.dumps(manifest.dict(), indent=2, sort_keys=True, default=str))
    logger.info(f"Wrote manifest for {manifest.command} to {path}")
    return path


def read_manifest(path: Union[str, Path]) -> ExperimentManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_FILE
    return ExperimentManifest(**json.loads(path.read_text()))
