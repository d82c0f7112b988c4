"""Federated test-time adaptation over frozen embeddings with shared prototype memories."""

from .adapt import PRESETS, LatteClient, LatteParams, communicate, memory_logits, preset
from .core import TextClassifier, entropy, normalize
from .data import EmbeddingDataset, TheoryWorld, load_dataset, partition, save_dataset
from .memory import ExternalMemory, LocalMemory, MemoryEntry, compute_prototype, merge
from .server import GlobalMemory
from .simulate import ExperimentConfig, MetricsReport, comm_bytes, run

__version__ = "0.1.0"

__all__ = [
    "PRESETS",
    "EmbeddingDataset",
    "ExperimentConfig",
    "ExternalMemory",
    "GlobalMemory",
    "LatteClient",
    "LatteParams",
    "LocalMemory",
    "MemoryEntry",
    "MetricsReport",
    "TextClassifier",
    "TheoryWorld",
    "comm_bytes",
    "communicate",
    "compute_prototype",
    "entropy",
    "load_dataset",
    "memory_logits",
    "merge",
    "normalize",
    "partition",
    "preset",
    "run",
    "save_dataset",
]
