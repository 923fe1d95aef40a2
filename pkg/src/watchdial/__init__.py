"""watchdial: video-grounded dialogue with executable reasoning programs.

Questions are parsed into small programs (entity grounding, question
summarization, spatial/temporal video attention) whose execution feeds a
response decoder; everything trains jointly on a from-scratch autodiff core.
"""

__version__ = "0.1.0"

from .encoders import Vocab, VideoFeatures, tokenize
from .errors import WatchdialError
from .programs import Program, ProgramStep, ModuleKind, parse_program, serialize_program
from .tensor import Tensor, Tape, ParamStore, backward, grad_check
from .training import TrainConfig, train, load_checkpoint, save_checkpoint

__all__ = [
    "Vocab",
    "VideoFeatures",
    "tokenize",
    "WatchdialError",
    "Program",
    "ProgramStep",
    "ModuleKind",
    "parse_program",
    "serialize_program",
    "Tensor",
    "Tape",
    "ParamStore",
    "backward",
    "grad_check",
    "TrainConfig",
    "train",
    "load_checkpoint",
    "save_checkpoint",
    "__version__",
]
