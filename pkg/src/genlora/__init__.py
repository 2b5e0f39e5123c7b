"""Generator-aware LoRA branches over a frozen small ViT, composed by a learned router.

Modules: ``numeric`` (kernels, AdamW, gradcheck), ``backbone``, ``lora``,
``router``, ``head``, ``model``, ``data``, ``trainer``, ``metrics``,
``checkpoint``, ``config`` and ``cli``.
"""

from .config import RunConfig, load_config, parse_config
from .data import Dataset, DatasetSpec, Sample, build_dataset
from .errors import GenLoraError
from .metrics import evaluate
from .model import Detector, predict

__version__ = "0.1.0"

__all__ = ["RunConfig", "load_config", "parse_config", "Dataset", "DatasetSpec", "Sample",
           "build_dataset", "GenLoraError", "evaluate", "Detector", "predict", "__version__"]
