"""Time series completion from relationally retrieved reference snippets."""
from .data import Mask, NormStats, Snippet, SplitSpec, TimeSeriesDB, load_dataset, save_dataset
from .errors import (
    CheckpointMismatch,
    ConvergenceError,
    DataError,
    RelcastError,
    RetrievalError,
    TrainingDiverged,
)
from .graph import RelationGraph, SpanPolicy, proximity, retrieve, retrieve_scored, top_k_references
from .synthesis import SynthesisConfig, SynthesisModel
from .synthetic import synth_data_gen

__version__ = "0.1.0"

__all__ = [
    "CheckpointMismatch", "ConvergenceError", "DataError", "Mask", "NormStats", "RelationGraph",
    "RelcastError", "RetrievalError", "Snippet", "SpanPolicy", "SplitSpec", "SynthesisConfig",
    "SynthesisModel", "TimeSeriesDB", "TrainingDiverged", "load_dataset", "proximity", "retrieve",
    "retrieve_scored", "save_dataset", "synth_data_gen", "top_k_references",
]
