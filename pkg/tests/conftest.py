import numpy as np
import pytest

from pregen.model import ModelConfig
from pregen.stackio import LayerStack, Manifest, SampleEntry, StackStore, TripletRecord
from pregen.synth import SynthConfig, generate_split_pair


def small_model_config(**overrides) -> ModelConfig:
    base = dict(num_layers=4, dim=16, heads=4, mlp_hidden=32, output_dim=8, dropout=0.0)
    base.update(overrides)
    return ModelConfig(**base)


def random_stack(rng: np.random.Generator, sample_id: str, num_layers=4, dim=16) -> LayerStack:
    return LayerStack(sample_id, rng.standard_normal((num_layers, dim)).astype(np.float32))


def tiny_manifest(num_layers=4, dim=16, pairs=2) -> Manifest:
    samples = []
    triplets = []
    for i in range(pairs):
        samples.append(SampleEntry(f"q{i}", "query", f"stacks/q{i}.pgstack"))
        samples.append(SampleEntry(f"t{i}", "target", f"stacks/t{i}.pgstack"))
        triplets.append(TripletRecord(f"q{i}", f"t{i}", f"edit {i}", f"g{i}"))
    return Manifest(1, num_layers, dim, "train", samples, triplets)


@pytest.fixture(scope="session")
def fixture_pair():
    """Default synthetic train/test pair (L=4, A=4, C=64, g=3, sigma=0.05)."""
    return generate_split_pair(SynthConfig(seed=0))


@pytest.fixture()
def null_store(tmp_path):
    return StackStore(tmp_path)
