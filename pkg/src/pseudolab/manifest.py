"""Run manifests: what produced an artifact directory, and from which seeds.

The manifest is the only artifact allowed to carry wall-clock data; every
other file written by a run must be a pure function of config and seeds
so reruns can be compared byte for byte.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from . import __version__

MANIFEST_NAME = "manifest.json"


def config_digest(config: dict) -> str:
    """Stable hash of a JSON-serializable config."""
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class RunManifest:
    config_digest: str
    seeds: dict[str, int] = field(default_factory=dict)
    tool_version: str = __version__
    created_utc: str = ""

    @classmethod
    def for_run(cls, config: dict, seeds: dict[str, int]) -> "RunManifest":
        return cls(config_digest=config_digest(config), seeds=dict(seeds),
                   created_utc=datetime.now(timezone.utc)
                   .isoformat(timespec="seconds"))

    def to_json_dict(self) -> dict:
        return {"config_digest": self.config_digest,
                "seeds": dict(sorted(self.seeds.items())),
                "tool_version": self.tool_version,
                "created_utc": self.created_utc}


def write_manifest(manifest: RunManifest, out_dir) -> Path:
    """Write manifest.json into out_dir; exactly one per artifact directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / MANIFEST_NAME
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest.to_json_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def read_manifest(out_dir) -> RunManifest:
    path = Path(out_dir) / MANIFEST_NAME
    with open(path, encoding="utf-8") as f:
        d = json.load(f)
    return RunManifest(config_digest=d["config_digest"], seeds=d["seeds"],
                       tool_version=d["tool_version"],
                       created_utc=d["created_utc"])
