"""Part-attention re-identification for occluded pedestrians, at desk scale."""

from .attention import PixelAttentionPredictor, part_attention_loss, visibility_scores
from .engine import Trainer, ablate, lr_schedule, train
from .evaluation import EvalReport, cmc_map, distance_matrix, evaluate
from .focuser import FeatureFocuser, PartEmbeddings
from .losses import id_loss, part_distance, part_triplet_loss, total_loss
from .model import PartReIDNet
from .synthetic import DataConfig, make_splits

__version__ = "0.1.0"
