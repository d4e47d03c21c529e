"""Run manifests written next to every command's outputs."""
import json
import logging
import subprocess
import time
from pathlib import Path
from typing import List, Optional, Union

from pydantic import BaseModel, Field

from gallat import __version__
from gallat.checkpoint import atomic_write_bytes

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"


def describe_version() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        out = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
            check=True,
        )
        described = out.stdout.strip()
        if described:
            return described
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


class RunManifest(BaseModel):
    command: str = Field(description="Subcommand that produced the outputs")
    config_path: Optional[str] = Field(default=None, description="Config file passed with --config")
    seed: Optional[int] = Field(default=None, description="Seed all randomness derived from")
    inputs: List[str] = Field(default_factory=list)
    outputs: List[str] = Field(default_factory=list)
    version: str = Field(default_factory=describe_version)
    duration_seconds: float = Field(ge=0)


def write_manifest(directory: Union[str, Path], manifest: RunManifest) -> Path:
    path = Path(directory) / MANIFEST_FILE
    text = json.dumps(manifest.model_dump(), indent=2, sort_keys=True) + "\n"
    atomic_write_bytes(path, text.encode("utf-8"))
    logger.debug(f"[Manifest] wrote {path}")
    return path


def record_run(
    command: str,
    directory: Union[str, Path],
    started: float,
    inputs: List[Union[str, Path]],
    outputs: List[Union[str, Path]],
    config_path: Optional[str] = None,
    seed: Optional[int] = None,
) -> Path:
    """Write the manifest of a finished command; ``started`` is a ``time.perf_counter()`` reading."""
    manifest = RunManifest(
        command=command,
        config_path=config_path,
        seed=seed,
        inputs=[str(p) for p in inputs],
        outputs=[str(p) for p in outputs],
        duration_seconds=max(time.perf_counter() - started, 0.0),
    )
    return write_manifest(directory, manifest)
