"""Versioned JSON container shared by model checkpoints.

Floats are written with ``repr`` precision by the json module, so a reload
reproduces every parameter bit for bit.
"""

from __future__ import annotations

import json
from pathlib import Path

from .errors import InvalidConfig

FORMAT = "hdgp-bench-checkpoint"
VERSION = 1


def write_container(path: str | Path, kind: str, config: dict, fingerprint: str | None, params: dict) -> None:
    doc = {"format": FORMAT, "version": VERSION, "kind": kind, "config": config,
           "fingerprint": fingerprint, "params": params}
    Path(path).write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")


def read_container(path: str | Path, kind: str) -> dict:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != FORMAT or doc.get("kind") != kind:
        raise InvalidConfig(f"{path}: not a {kind} checkpoint")
    if doc.get("version") != VERSION:
        raise InvalidConfig(f"{path}: unsupported checkpoint version {doc.get('version')}")
    return doc
