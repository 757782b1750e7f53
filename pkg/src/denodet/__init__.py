"""Joint denoising and detection of fluorescent particles with a
two-decoder U-Net, built on a small numpy autodiff engine."""

from .model import Denodet, ModelConfig, load_checkpoint, save_checkpoint
from .simgen import SequenceSpec, load_dataset, make_sequence

__all__ = ["Denodet", "ModelConfig", "SequenceSpec", "load_checkpoint", "load_dataset", "make_sequence", "save_checkpoint"]
__version__ = "0.1.0"
