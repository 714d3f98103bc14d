"""Extraction job description and input parsing.

The input manifest is JSON-lines, one item per line:

    {"sample_id": "q0", "role": "query", "group_key": "src0",
     "video": "clips/a.mp4", "text": "replace the guitar with a piano",
     "target_id": "t0"}
    {"sample_id": "t0", "role": "target", "group_key": "src0",
     "video": "clips/b.mp4"}

``video`` may point to a video file or a directory of frame images. Queries
must carry ``text`` (the modification request joins the frames in the
prompt); targets must not (the target video is the sole input). ``target_id``
on a query is optional and produces a triplet record in the output manifest.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field


class JobError(ValueError):
    pass


@dataclass(frozen=True)
class ExtractionItem:
    sample_id: str
    role: str
    group_key: str
    video: str
    text: str | None = None
    target_id: str | None = None


@dataclass
class ExtractionJob:
    model: str
    items: list[ExtractionItem]
    out_dir: str
    frames_per_video: int = 8
    device: str = "cpu"
    include_embedding_layer: bool = False
    split: str = "test"

    def validate(self) -> None:
        if self.frames_per_video < 1:
            raise JobError(f"frames_per_video must be >= 1, got {self.frames_per_video}")
        if self.split not in ("train", "test"):
            raise JobError(f"split must be train or test, got {self.split!r}")
        if not self.items:
            raise JobError("no items to extract")
        seen: set[str] = set()
        for item in self.items:
            if item.role not in ("query", "target"):
                raise JobError(f"{item.sample_id}: role must be query or target")
            if item.sample_id in seen:
                raise JobError(f"duplicate sample_id {item.sample_id!r}")
            seen.add(item.sample_id)
            if not item.group_key:
                raise JobError(f"{item.sample_id}: empty group_key")
            if item.role == "query" and not item.text:
                raise JobError(f"{item.sample_id}: query items need modification text")
            if item.role == "target" and item.text:
                raise JobError(f"{item.sample_id}: target items must not carry text")
            if item.target_id is not None and item.role != "query":
                raise JobError(f"{item.sample_id}: only query items may name a target_id")


def load_items(path) -> list[ExtractionItem]:
    items = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise JobError(f"{path}:{lineno}: invalid record: {exc}") from exc
            try:
                items.append(
                    ExtractionItem(
                        sample_id=str(rec["sample_id"]),
                        role=str(rec["role"]),
                        group_key=str(rec["group_key"]),
                        video=str(rec["video"]),
                        text=rec.get("text"),
                        target_id=rec.get("target_id"),
                    )
                )
            except KeyError as exc:
                raise JobError(f"{path}:{lineno}: missing field {exc}") from exc
    return items
