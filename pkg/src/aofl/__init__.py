"""Partial disentanglement of shared and modality-specific features for
multimodal utterance classification, built on a small numpy autodiff core.

Submodules: ``tensor`` (autodiff), ``model``, ``losses``, ``dataio``,
``train`` (training, metrics, angle diagnostics), ``ablation`` and ``cli``.
"""

from .model import MODALITIES, ModelDims, ModelParams, forward, param_count
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = ["MODALITIES", "ModelDims", "ModelParams", "Tensor", "forward", "no_grad", "param_count"]
