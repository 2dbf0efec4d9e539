"""Lesion segmentation and detection on a small numpy autodiff engine."""
from .nets import NetworkSpec, build
from .postprocess import binarize, detect, match_lesions
from .tensor import Graph, Tensor

__version__ = "0.1.0"
__all__ = ["Graph", "NetworkSpec", "Tensor", "binarize", "build", "detect", "match_lesions"]
