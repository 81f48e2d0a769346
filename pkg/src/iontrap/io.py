"""Run metadata, config parsing and small file helpers shared by the CLI."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from . import __version__
from .layout import ConfigError


def config_hash(raw: bytes | str) -> str:
    if isinstance(raw, str):
        raw = raw.encode()
    return hashlib.sha256(raw).hexdigest()[:16]


def run_metadata(raw_config: bytes | str, seed: int) -> dict:
    return {"tool_version": __version__, "config_hash": config_hash(raw_config), "seed": int(seed)}


def header_line(meta: dict) -> str:
    """One-line ``key=value`` rendering for CSV comment headers."""
    return " ".join(f"{k}={v}" for k, v in meta.items())


def read_json(path: str | Path) -> tuple[dict, bytes]:
    """Parse a JSON file, mapping syntax errors to :class:`ConfigError` with line/column."""
    p = Path(path)
    try:
        raw = p.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read {p}: {exc.strerror}") from exc
    try:
        return json.loads(raw), raw
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    except UnicodeDecodeError as exc:
        raise ConfigError(f"{p}: not UTF-8 text") from exc


def write_json(path: str | Path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=False) + "\n")
