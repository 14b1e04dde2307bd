"""JSONL dataset manifests: one object per image or patch row.

Paths are stored relative to the manifest file when possible so dataset
directories stay relocatable; loading resolves them back to absolute paths
and verifies the files exist.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path

from ..errors import EmptyManifest, InvalidConfig


@dataclass
class ManifestRow:
    path: str
    source_id: str
    label: int
    device_id: str = ""
    manipulation: str = "unaltered"
    x0: int | None = None
    y0: int | None = None
    size: int | None = None
    score: float | None = None

    def to_json(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if v is not None}
        return out


def save_manifest(rows, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent.resolve()
    with path.open("w", encoding="utf-8") as fh:
        for row in rows:
            record = row.to_json()
            p = Path(record["path"])
            if p.is_absolute():
                try:
                    record["path"] = os.path.relpath(p, base)
                except ValueError:
                    pass
            fh.write(json.dumps(record) + "\n")
    return path


def load_manifest(path, check_paths: bool = True, classes=None) -> list[ManifestRow]:
    path = Path(path)
    if not path.exists():
        raise EmptyManifest(f"manifest {path} does not exist")
    base = path.parent.resolve()
    rows: list[ManifestRow] = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"{path}:{lineno}: bad JSON ({exc})") from exc
        for key in ("path", "source_id", "label"):
            if key not in record:
                raise InvalidConfig(f"{path}:{lineno}: missing field {key!r}")
        p = Path(record["path"])
        if not p.is_absolute():
            p = base / p
        if check_paths and not p.exists():
            raise InvalidConfig(f"{path}:{lineno}: file not found: {p}")
        if classes is not None and record["label"] not in classes:
            raise InvalidConfig(
                f"{path}:{lineno}: label {record['label']} not in declared classes"
            )
        rows.append(
            ManifestRow(
                path=str(p),
                source_id=record["source_id"],
                label=int(record["label"]),
                device_id=record.get("device_id", ""),
                manipulation=record.get("manipulation", "unaltered"),
                x0=record.get("x0"),
                y0=record.get("y0"),
                size=record.get("size"),
                score=record.get("score"),
            )
        )
    if not rows:
        raise EmptyManifest(f"manifest {path} has no rows")
    return rows
