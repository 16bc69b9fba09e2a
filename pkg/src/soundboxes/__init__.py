"""Audio-visual source separation that picks sounding objects from box proposals."""
from .audio import AudioClip, Mask, Spectrogram, StftConfig, istft, mix, stft
from .config import RunConfig, desk_config, load_config
from .errors import ConfigError, DataError, InvalidInputError
from .proposals import BoundingBox, ProposalSet, propose_boxes

__version__ = "0.1.0"

__all__ = ["AudioClip", "Mask", "Spectrogram", "StftConfig", "istft", "mix", "stft", "RunConfig",
           "desk_config", "load_config", "ConfigError", "DataError", "InvalidInputError", "BoundingBox",
           "ProposalSet", "propose_boxes"]
