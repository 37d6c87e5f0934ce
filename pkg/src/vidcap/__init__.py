"""Video captioning with multi-level feature alignment and two-stage attention.

The package is self-contained on top of numpy: a small reverse-mode autodiff
core, a scaled-down C3D extractor, receptive-field arithmetic, the attention
decoder, the hard-attention multi-sample estimator, a synthetic corpus and a
command line front end (``vidcap``).
"""

from .data import Corpus, CorpusConfig, Vocabulary, gen_corpus
from .errors import ConfigError, ContractError, FormatError, NumericError, ShapeError, VidcapError
from .estimator import C3DEncoder, VideoCaptioner
from .model import CaptionModel
from .training import TrainConfig, train

__all__ = [
    "C3DEncoder", "CaptionModel", "ConfigError", "ContractError", "Corpus", "CorpusConfig", "FormatError",
    "NumericError", "ShapeError", "TrainConfig", "VideoCaptioner", "VidcapError", "Vocabulary", "gen_corpus",
    "train",
]
