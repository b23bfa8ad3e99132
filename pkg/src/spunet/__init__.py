"""Self-supervised point-cloud upsampling with a coarse-to-fine network."""

from .geometry import Patch, TriangleMesh, fps, geodesic_patches, knn
from .loss import LossWeights, joint_loss
from .metrics import MetricReport, evaluate
from .network import NetworkConfig, ReconstructionNet, coarse_to_fine
from .training import TrainConfig, Trainer, load_checkpoint, save_checkpoint, upsample_cloud

__version__ = "0.1.0"

__all__ = [
    "LossWeights",
    "MetricReport",
    "NetworkConfig",
    "Patch",
    "ReconstructionNet",
    "TrainConfig",
    "Trainer",
    "TriangleMesh",
    "coarse_to_fine",
    "evaluate",
    "fps",
    "geodesic_patches",
    "joint_loss",
    "knn",
    "load_checkpoint",
    "save_checkpoint",
    "upsample_cloud",
]
