"""Frame loading: uniform sampling from video files or frame directories."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".webp")


class DecodeError(RuntimeError):
    pass


def uniform_indices(total: int, count: int) -> list[int]:
    """`count` indices spread evenly over range(total), endpoints included."""
    if total < 1:
        raise DecodeError("no frames to sample from")
    return [int(round(x)) for x in np.linspace(0, total - 1, count)]


def _frames_from_directory(path: Path, count: int) -> list[Image.Image]:
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise DecodeError(f"{path}: no frame images found")
    chosen = [files[i] for i in uniform_indices(len(files), count)]
    try:
        return [Image.open(p).convert("RGB") for p in chosen]
    except OSError as exc:
        raise DecodeError(f"{path}: {exc}") from exc


def _frames_from_video(path: Path, count: int) -> list[Image.Image]:
    import cv2

    cap = cv2.VideoCapture(str(path))
    if not cap.isOpened():
        raise DecodeError(f"{path}: cannot open video")
    try:
        total = int(cap.get(cv2.CAP_PROP_FRAME_COUNT))
        if total < 1:
            raise DecodeError(f"{path}: video reports no frames")
        frames = []
        for idx in uniform_indices(total, count):
            cap.set(cv2.CAP_PROP_POS_FRAMES, idx)
            ok, frame = cap.read()
            if not ok:
                raise DecodeError(f"{path}: failed to read frame {idx}")
            frames.append(Image.fromarray(frame[:, :, ::-1]))  # BGR -> RGB
        return frames
    finally:
        cap.release()


def load_frames(video: str, count: int) -> list[Image.Image]:
    """Uniformly sampled RGB frames from a video file or a frame directory."""
    path = Path(video)
    if not path.exists():
        raise DecodeError(f"{path}: does not exist")
    if path.is_dir():
        return _frames_from_directory(path, count)
    return _frames_from_video(path, count)
