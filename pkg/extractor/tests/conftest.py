import numpy as np
import pytest
import torch
from PIL import Image


@pytest.fixture(scope="session")
def tiny_checkpoint(tmp_path_factory):
    """A small local vision-language checkpoint (LLaVA architecture) built
    offline: 3 language blocks of width 64, a 2-block vision tower on 32px
    images, and a word-level tokenizer with an <image> token."""
    from tokenizers import Tokenizer, models, pre_tokenizers
    from transformers import (
        CLIPImageProcessor,
        CLIPVisionConfig,
        LlamaConfig,
        LlavaConfig,
        LlavaForConditionalGeneration,
        LlavaProcessor,
        PreTrainedTokenizerFast,
    )

    vocab = {
        tok: i
        for i, tok in enumerate(
            ["<unk>", "<s>", "</s>", "<pad>", "<image>"]
            + [f"w{i}" for i in range(50)]
            + list("abcdefghijklmnopqrstuvwxyz")
        )
    }
    tok = Tokenizer(models.WordLevel(vocab, unk_token="<unk>"))
    tok.pre_tokenizer = pre_tokenizers.Whitespace()
    tokenizer = PreTrainedTokenizerFast(
        tokenizer_object=tok,
        bos_token="<s>",
        eos_token="</s>",
        pad_token="<pad>",
        unk_token="<unk>",
        additional_special_tokens=["<image>"],
    )
    vision = CLIPVisionConfig(
        hidden_size=32,
        intermediate_size=64,
        num_attention_heads=4,
        num_hidden_layers=2,
        image_size=32,
        patch_size=16,
        projection_dim=32,
    )
    text = LlamaConfig(
        hidden_size=64,
        intermediate_size=128,
        num_attention_heads=4,
        num_hidden_layers=3,
        vocab_size=len(vocab),
        max_position_embeddings=512,
    )
    config = LlavaConfig(
        vision_config=vision,
        text_config=text,
        image_token_index=tokenizer.convert_tokens_to_ids("<image>"),
        projector_hidden_act="gelu",
    )
    torch.manual_seed(0)
    model = LlavaForConditionalGeneration(config)
    model.eval()
    processor = LlavaProcessor(
        image_processor=CLIPImageProcessor(
            size={"shortest_edge": 32}, crop_size={"height": 32, "width": 32}
        ),
        tokenizer=tokenizer,
        patch_size=16,
    )
    path = tmp_path_factory.mktemp("checkpoint")
    model.save_pretrained(path)
    processor.save_pretrained(path)
    return {"path": str(path), "depth": 3, "width": 64}


def _frame(seed: int, shape=(40, 48, 3)) -> Image.Image:
    rng = np.random.default_rng(seed)
    return Image.fromarray((rng.random(shape) * 255).astype("uint8"))


@pytest.fixture(scope="session")
def frame_dirs(tmp_path_factory):
    """Four frame directories with differing content and frame counts."""
    root = tmp_path_factory.mktemp("clips")
    out = {}
    for vid, count in (("clip_q0", 5), ("clip_q1", 12), ("clip_t0", 3), ("clip_t1", 9)):
        d = root / vid
        d.mkdir()
        for i in range(count):
            _frame(hash(vid) % 1000 + i).save(d / f"frame_{i:03d}.png")
        out[vid] = str(d)
    return out


@pytest.fixture(scope="session")
def video_file(tmp_path_factory):
    import cv2

    path = tmp_path_factory.mktemp("videos") / "clip.avi"
    writer = cv2.VideoWriter(str(path), cv2.VideoWriter_fourcc(*"MJPG"), 5, (48, 32))
    assert writer.isOpened()
    rng = np.random.default_rng(0)
    for _ in range(10):
        writer.write((rng.random((32, 48, 3)) * 255).astype(np.uint8))
    writer.release()
    return str(path)


def make_items(frame_dirs, with_triplets=True):
    from pgextract.jobs import ExtractionItem

    return [
        ExtractionItem("q0", "query", "src0", frame_dirs["clip_q0"],
                       text="replace w3 with w7", target_id="t0" if with_triplets else None),
        ExtractionItem("q1", "query", "src1", frame_dirs["clip_q1"],
                       text="w12 instead of w9", target_id="t1" if with_triplets else None),
        ExtractionItem("t0", "target", "src0", frame_dirs["clip_t0"]),
        ExtractionItem("t1", "target", "src1", frame_dirs["clip_t1"]),
    ]
