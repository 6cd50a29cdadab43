"""Shared plumbing: seeded RNG substreams, stable hashing, manifest writing."""

from __future__ import annotations

import hashlib
import json
import os
import platform
import time
from pathlib import Path

import numpy as np


def _label_entropy(label: str) -> int:
    # sha256, not hash(): Python string hashing is salted per process.
    return int.from_bytes(hashlib.sha256(label.encode()).digest()[:8], "little")


def substream(seed: int, *labels) -> np.random.Generator:
    """Independent, reproducible RNG stream named by (seed, labels).

    Labels may be strings or ints; the same (seed, labels) always yields the
    same stream regardless of creation order.
    """
    keys = [_label_entropy(x) if isinstance(x, str) else int(x) for x in labels]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed)] + keys)))


def stable_unit_float(*parts) -> float:
    """Deterministic pseudo-uniform in [0, 1) from arbitrary hashable parts.

    Used for per-vehicle assignments that must not depend on draw order.
    """
    h = hashlib.sha256("|".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "little") / 2**64


def env_seed_override(seed: int) -> int:
    """Apply the ECODRIVE_SEED environment override, if set."""
    raw = os.environ.get("ECODRIVE_SEED")
    return int(raw) if raw else seed


def write_manifest(out_dir: Path, command: str, config: dict) -> Path:
    """Record the full run configuration so the run can be reproduced."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    from ecodrive import __version__

    manifest = {
        "schema": 1,
        "tool": "ecodrive",
        "version": __version__,
        "command": command,
        "config": config,
        "python": platform.python_version(),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path
