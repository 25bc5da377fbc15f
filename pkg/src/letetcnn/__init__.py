"""Landmark-enhanced tetrahedral mesh transformer.

Volumetric Laplacian assembly, GP landmark selection, patch tokenization,
Chebyshev spectral convolution, radius-graph attention, training/evaluation,
and Grad-CAM mesh heatmaps.
"""

__version__ = "0.1.0"

from .mesh_io import TetMesh, VertexField  # noqa: F401
from .lbo import LboBundle, SparseMatrix, build_lbo  # noqa: F401
from .landmarks import DiffusionKernelSpec, LandmarkSet  # noqa: F401
from .patches import PatchAssignment  # noqa: F401
from .model import (  # noqa: F401
    MeshSample,
    Metrics,
    Model,
    ModelConfig,
    TrainConfig,
    evaluate,
    prepare_sample,
    train,
)
from .synth import SynthSpec, build_dataset  # noqa: F401
from .explain import Heatmap, gradcam  # noqa: F401
