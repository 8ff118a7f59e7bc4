"""Multi-modal deep hashing with selective state-space enhancement."""

from .hamming import CodeBank, hamming, knn, pack, rank, unpack
from .metrics import EvalReport, average_precision, mean_average_precision, paper_reference
from .model import DMMH, ModelConfig, encode_bank, hash_loss, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
