"""Clip manifests: one JSON object per line."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

from ..errors import DataError

REQUIRED = ("clip_id", "identity", "expression_class", "intensity", "video_ref", "audio_ref")


class ManifestError(DataError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.line = line


@dataclass(frozen=True)
class ClipRecord:
    clip_id: str
    identity: str
    expression_class: str
    intensity: str
    video_ref: str
    audio_ref: str
    frame_boxes: tuple[tuple[int, int, int, int, int], ...] | None = None

    def box_for(self, frame_index: int):
        if self.frame_boxes is None:
            return None
        for f, x, y, w, h in self.frame_boxes:
            if f == frame_index:
                return (x, y, w, h)
        return None

    def resolve(self, base: Path) -> tuple[Path, Path]:
        return base / self.video_ref, base / self.audio_ref


def _to_json(rec: ClipRecord) -> str:
    d = asdict(rec)
    if rec.frame_boxes is not None:
        d["frame_boxes"] = [list(b) for b in rec.frame_boxes]
    return json.dumps(d, ensure_ascii=False, sort_keys=True)


def write_manifest(records: Iterable[ClipRecord], path: str | Path):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(_to_json(rec) + "\n")


def load_manifest(path: str | Path) -> list[ClipRecord]:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise DataError(f"cannot read manifest {path}: {e}") from e
    records = []
    for n, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise ManifestError(path, n, f"invalid JSON ({e.msg})") from e
        if not isinstance(obj, dict):
            raise ManifestError(path, n, "record is not an object")
        for key in REQUIRED:
            if key not in obj:
                raise ManifestError(path, n, f"missing field {key!r}")
            if not isinstance(obj[key], str) or not obj[key]:
                raise ManifestError(path, n, f"field {key!r} must be a non-empty string")
        boxes = obj.get("frame_boxes")
        if boxes is not None:
            try:
                boxes = tuple(tuple(int(v) for v in b) for b in boxes)
            except (TypeError, ValueError) as e:
                raise ManifestError(path, n, "frame_boxes must be lists of integers") from e
            if any(len(b) != 5 for b in boxes):
                raise ManifestError(path, n, "each frame box needs (frame_index, x, y, w, h)")
        records.append(ClipRecord(*(obj[k] for k in REQUIRED), frame_boxes=boxes))
    return records


def select_classes(records: Sequence[ClipRecord], classes: Sequence[str]) -> list[ClipRecord]:
    """Keep only records whose class is in ``classes`` (drops e.g. neutral)."""
    keep = set(classes)
    return [r for r in records if r.expression_class in keep]
