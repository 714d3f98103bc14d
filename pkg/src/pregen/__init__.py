"""Multi-layer hidden-state aggregation for composed video retrieval.

The package trains a lightweight encoder over per-layer final-token hidden
states dumped by a frozen backbone, and evaluates retrieval with exact
cosine ranking. Submodules:

* ``stackio``    binary ``.pgstack`` stacks, manifests, dataset validation
* ``synth``      synthetic datasets with a brute-force-checkable answer key
* ``model``      the aggregator with exact numpy forward/backward passes
* ``training``   symmetric InfoNCE, batch planning, AdamW, the train loop
* ``retrieval``  corpus embedding, exact cosine ranking, Recall@k reports
* ``gradcheck``  finite-difference verification of all gradients
* ``cli``        the ``pregen`` command
"""

from .model import ModelConfig, ModelParams, forward, init_params, load_checkpoint, save_checkpoint
from .stackio import LayerStack, Manifest, StackStore, TripletRecord, load_manifest, save_manifest
from .synth import SynthConfig, generate_synthetic_dataset, oracle_nn_recall
from .training import TrainConfig, build_batches, info_nce, similarity_matrix, train
from .retrieval import evaluate, recall_at_k

__all__ = [
    "LayerStack",
    "Manifest",
    "ModelConfig",
    "ModelParams",
    "StackStore",
    "SynthConfig",
    "TrainConfig",
    "TripletRecord",
    "build_batches",
    "evaluate",
    "forward",
    "generate_synthetic_dataset",
    "info_nce",
    "init_params",
    "load_checkpoint",
    "load_manifest",
    "oracle_nn_recall",
    "recall_at_k",
    "save_checkpoint",
    "save_manifest",
    "similarity_matrix",
    "train",
]

__version__ = "0.1.0"
