"""Hidden-state extraction from a frozen vision-language model.

Each sample makes one forward pass with hidden-state output enabled. For
every transformer block (the embedding-layer output is excluded unless
requested) the hidden state at the final sequence position is taken, upcast
to float32, and written as one row of the sample's `.pgstack` dump. Queries
are fed as frames followed by the raw modification text with no instruction
wrapper; targets are fed frames alone. The constructed prompt is logged
verbatim, and any failure to build or run the sequence aborts with the
prompt echoed in the error.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .dump import atomic_write_bytes, manifest_bytes, write_stack_file
from .frames import DecodeError, load_frames
from .jobs import ExtractionJob

logger = logging.getLogger(__name__)


class ExtractionError(RuntimeError):
    pass


@dataclass
class ExtractionReport:
    manifest_path: str
    num_layers: int
    dim: int
    written: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)


def load_model_and_processor(model_id: str, device: str):
    from transformers import AutoModelForImageTextToText, AutoProcessor

    processor = AutoProcessor.from_pretrained(model_id)
    model = AutoModelForImageTextToText.from_pretrained(model_id)
    model.to(device)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model, processor


def model_depth_and_width(model) -> tuple[int, int]:
    """Transformer block count and hidden size of the language backbone."""
    config = model.config
    text_config = getattr(config, "text_config", None) or config
    return int(text_config.num_hidden_layers), int(text_config.hidden_size)


def image_token(processor) -> str:
    token = getattr(processor, "image_token", None)
    if token:
        return str(token)
    return "<image>"


def build_prompt(processor, n_frames: int, text: str | None) -> str:
    prompt = image_token(processor) * n_frames
    if text:
        prompt += " " + text
    return prompt


def _layer_rows(model, processor, frames, text, device, include_embedding_layer):
    prompt = build_prompt(processor, len(frames), text)
    logger.info("prompt: %r", prompt)
    try:
        inputs = processor(text=prompt, images=frames, return_tensors="pt").to(device)
        with torch.no_grad():
            output = model(**inputs, output_hidden_states=True)
        hidden = output.hidden_states
    except Exception as exc:
        raise ExtractionError(f"sequence failed for prompt {prompt!r}: {exc}") from exc
    start = 0 if include_embedding_layer else 1
    rows = [state[0, -1, :].to(torch.float32).cpu().numpy() for state in hidden[start:]]
    return np.stack(rows, axis=0)


def extract(job: ExtractionJob) -> ExtractionReport:
    """Run the job; returns a report of written and skipped samples.

    Undecodable videos are skipped and logged (triplets referencing them are
    dropped); everything else aborts the run.
    """
    job.validate()
    out_dir = Path(job.out_dir)
    (out_dir / "stacks").mkdir(parents=True, exist_ok=True)
    model, processor = load_model_and_processor(job.model, job.device)
    depth, width = model_depth_and_width(model)
    num_layers = depth + 1 if job.include_embedding_layer else depth
    if width % 2 != 0:
        raise ExtractionError(f"model hidden size {width} is odd; dumps need an even width")

    samples: list[tuple[str, str, str]] = []
    written: list[str] = []
    skipped: list[str] = []
    for item in job.items:
        try:
            frames = load_frames(item.video, job.frames_per_video)
        except DecodeError as exc:
            logger.warning("skipping %s: %s", item.sample_id, exc)
            skipped.append(item.sample_id)
            continue
        stack = _layer_rows(
            model, processor, frames, item.text, job.device, job.include_embedding_layer
        )
        if stack.shape != (num_layers, width):
            raise ExtractionError(
                f"{item.sample_id}: dump shape {stack.shape} does not match the model's "
                f"({num_layers}, {width})"
            )
        rel_path = f"stacks/{item.sample_id}.pgstack"
        write_stack_file(out_dir / rel_path, item.sample_id, stack)
        samples.append((item.sample_id, item.role, rel_path))
        written.append(item.sample_id)

    ok = set(written)
    triplets = [
        (item.sample_id, item.target_id, item.text or "", item.group_key)
        for item in job.items
        if item.role == "query"
        and item.target_id is not None
        and item.sample_id in ok
        and item.target_id in ok
    ]
    manifest_path = out_dir / "extracted.manifest"
    atomic_write_bytes(
        manifest_path, manifest_bytes(num_layers, width, job.split, samples, triplets)
    )
    return ExtractionReport(str(manifest_path), num_layers, width, written, skipped)
