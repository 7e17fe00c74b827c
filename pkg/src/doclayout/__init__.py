"""Document layout generation: representation, tasks, an n-gram generator and metrics."""
from __future__ import annotations

__version__ = "0.1.0"

from .core import BBox, Element, Layout, LayoutError, dequantize, quantize
from .taxonomy import LabelMap, Taxonomy, default_coarse_taxonomy
from .serialization import Vocabulary, decode_layout, encode_layout
from .tasks import TaskInstance, TaskKind, make_mixture, make_task
from .generator import NGramModel, generate, refine, train

__all__ = [
    "BBox", "Element", "Layout", "LayoutError", "dequantize", "quantize",
    "LabelMap", "Taxonomy", "default_coarse_taxonomy",
    "Vocabulary", "decode_layout", "encode_layout",
    "TaskInstance", "TaskKind", "make_mixture", "make_task",
    "NGramModel", "generate", "refine", "train",
]
