"""Run manifests and report post-processing.

Every CLI output embeds (or sits next to) a manifest holding the resolved
parameters, input digests, seed, and tool version, so any output can be
reproduced byte-for-byte by re-running the recorded command. All JSON is
serialized canonically (sorted keys, fixed separators); CSV uses '.'
decimals regardless of locale.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: list[str]
    params: dict
    inputs: dict[str, str] = field(default_factory=dict)
    seed: int | None = None
    version: str = ""

    @classmethod
    def build(
        cls,
        command: Sequence[str],
        params: Mapping,
        input_paths: Iterable[str | Path] = (),
        seed: int | None = None,
    ) -> "RunManifest":
        from eesim import __version__

        return cls(
            command=list(command),
            params=dict(params),
            inputs={str(p): file_digest(p) for p in input_paths},
            seed=seed,
            version=__version__,
        )

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "params": self.params,
            "inputs": self.inputs,
            "seed": self.seed,
            "version": self.version,
        }


def dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_json_report(path: str | Path, manifest: RunManifest, payload: Mapping) -> None:
    doc = {"manifest": manifest.to_dict(), "report": payload}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_json(doc))


def write_manifest_sidecar(path: str | Path, manifest: RunManifest) -> Path:
    """Companion manifest for non-JSON outputs (JSONL traces, CSV)."""
    side = Path(str(path) + ".manifest.json")
    with open(side, "w", encoding="utf-8") as fh:
        fh.write(dump_json(manifest.to_dict()))
    return side


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_cell(v) for v in row) + "\n")


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def percentiles(values: Sequence[float], points: Sequence[float]) -> dict[str, float]:
    """Percentiles by linear interpolation between closest ranks."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return {f"p{_fmt_point(p)}": 0.0 for p in points}
    return {
        f"p{_fmt_point(p)}": float(np.percentile(arr, p, method="linear")) for p in points
    }


def _fmt_point(p: float) -> str:
    return f"{p:g}"


def cdf_rows(values: Sequence[float]) -> list[tuple[float, float]]:
    """Sorted (latency_ms, cumulative_fraction) pairs for CDF plotting."""
    arr = sorted(float(v) for v in values)
    n = len(arr)
    return [(v, (i + 1) / n) for i, v in enumerate(arr)]
