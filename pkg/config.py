"""
Configuration layer: environment defaults, logging setup, run provenance.
"""

import hashlib
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

from dotenv import load_dotenv

TOOL_VERSION = "1.0.0"

EXIT_OK = 0
EXIT_PARSE = 1
EXIT_INVARIANT = 2
EXIT_NUMERICAL = 3

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


@dataclass
class Settings:
    """Defaults read from the environment (and an optional .env file)."""
    log_level: str = "INFO"
    threads: int = 1
    block_size: int = 256
    output_dir: str = "outputs"


def load_settings(env_file: Optional[str] = None) -> Settings:
    """Load settings from the environment after reading a .env file if present."""
    load_dotenv(env_file)
    try:
        return Settings(
            log_level=os.getenv("KDEASHMM_LOG_LEVEL", "INFO").upper(),
            threads=int(os.getenv("KDEASHMM_THREADS", "1")),
            block_size=int(os.getenv("KDEASHMM_BLOCK_SIZE", "256")),
            output_dir=os.getenv("KDEASHMM_OUTPUT_DIR", "outputs"),
        )
    except ValueError as e:
        raise ValueError(f"Invalid KDEASHMM_* environment value: {e}")


def setup_logging(level: str = "INFO") -> None:
    """Send log records and captured warnings to stderr."""
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO),
                        format=LOG_FORMAT, force=True)
    logging.captureWarnings(True)


def resolve_threads(threads: int) -> int:
    """0 means one worker per CPU."""
    if threads < 0:
        raise ValueError(f"threads must be >= 0, got {threads}")
    if threads == 0:
        return os.cpu_count() or 1
    return threads


def file_sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


@dataclass
class RunConfig:
    """Everything needed to reproduce one command invocation."""
    command: str
    seed: Optional[int] = None
    threads: int = 1
    log_level: str = "INFO"
    outputs: Dict[str, str] = field(default_factory=dict)
    flags: Dict[str, Any] = field(default_factory=dict)
    inputs: Dict[str, str] = field(default_factory=dict)

    def add_input(self, path: str) -> None:
        """Record the content hash of an input file (directories hash each file)."""
        if os.path.isdir(path):
            for name in sorted(os.listdir(path)):
                full = os.path.join(path, name)
                if os.path.isfile(full):
                    self.inputs[full] = file_sha256(full)
        else:
            self.inputs[path] = file_sha256(path)

    def provenance(self) -> Dict[str, Any]:
        """Block embedded in every output document.

        The thread count is not echoed: outputs must be identical for any value.
        """
        flags = {k: v for k, v in sorted(self.flags.items()) if k != "threads"}
        return {
            "tool_version": TOOL_VERSION,
            "command": self.command,
            "seed": self.seed,
            "flags": flags,
            "inputs": dict(sorted(self.inputs.items())),
        }
