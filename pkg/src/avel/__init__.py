"""Audio-visual event localization on precomputed segment features.

Submodules:
    avedata   records, manifests, tensor blobs, synthetic data, splits
    edrnet    the decomposition/recomposition network and its gradients
    losses    segment cross entropy and the patch-contrast regularizer
    smbfuse   state-machine clip fusion augmentation
    b2ilc     bag-level correction of hard segment predictions
    harness   training loop, evaluation, ablations, checkpoints, CAM export
    cli       command-line front end
"""

from .avedata import Dataset, SynthConfig, VideoRecord, load_dataset, save_dataset, synth_dataset
from .b2ilc import PredictionSequence, correct
from .edrnet import EdrConfig, forward, init_params
from .harness import TrainConfig, evaluate, train
from .losses import LossWeights

__all__ = [
    "Dataset",
    "EdrConfig",
    "LossWeights",
    "PredictionSequence",
    "SynthConfig",
    "TrainConfig",
    "VideoRecord",
    "correct",
    "evaluate",
    "forward",
    "init_params",
    "load_dataset",
    "save_dataset",
    "synth_dataset",
    "train",
]

__version__ = "0.1.0"
