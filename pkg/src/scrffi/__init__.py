"""Source-free cross-receiver RF fingerprint adaptation on synthetic IQ data."""

from .adapt import AdaptConfig, adapt, train_source
from .nn_core import ArchDescriptor, init_model, load_checkpoint, save_checkpoint
from .signal_sim import DatasetSpec, EmitterProfile, ReceiverProfile, generate_dataset

__version__ = "0.1.0"

__all__ = ["AdaptConfig", "ArchDescriptor", "DatasetSpec", "EmitterProfile", "ReceiverProfile",
           "adapt", "generate_dataset", "init_model", "load_checkpoint", "save_checkpoint",
           "train_source"]
