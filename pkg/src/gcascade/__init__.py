"""Graph-convolutional cascaded decoder for 2D semantic segmentation.

A small numpy autodiff core (``tensor``), neural building blocks (``nn``,
``graph``, ``decoder``), training machinery (``losses``, ``optim``,
``training``, ``data``), evaluation (``metrics``), complexity accounting
(``complexity``), gradient verification (``gradcheck``) and an estimator
facade (``estimator``). ``cli`` exposes the command line tools.
"""

from .config import RunConfig, parse_config, read_config, serialize_config
from .data import SynthConfig, make_synth_dataset, read_dataset, write_dataset
from .decoder import DecoderConfig, GCascadeDecoder, PredictionSet, SegmentationModel
from .estimator import GCascadeSegmenter, check_image_batch, check_mask_batch
from .graph import NeighborGraph, build_knn_graph
from .losses import LossConfig, combined_loss, mutation_loss
from .metrics import MetricsReport, evaluate, evaluate_masks
from .optim import AdamW, OptimConfig
from .tensor import Parameter, Tape, Tensor, backward, get_precision, set_precision
from .training import TrainConfig, load_model, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "AdamW",
    "DecoderConfig",
    "GCascadeDecoder",
    "GCascadeSegmenter",
    "LossConfig",
    "MetricsReport",
    "NeighborGraph",
    "OptimConfig",
    "Parameter",
    "PredictionSet",
    "RunConfig",
    "SegmentationModel",
    "SynthConfig",
    "Tape",
    "Tensor",
    "TrainConfig",
    "backward",
    "build_knn_graph",
    "check_image_batch",
    "check_mask_batch",
    "combined_loss",
    "evaluate",
    "evaluate_masks",
    "get_precision",
    "load_model",
    "make_synth_dataset",
    "mutation_loss",
    "parse_config",
    "read_config",
    "read_dataset",
    "save_checkpoint",
    "serialize_config",
    "set_precision",
    "train",
    "write_dataset",
    "__version__",
]
