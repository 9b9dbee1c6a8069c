# Second-order average pooling head for LiDAR place recognition.

from . import common
from .common import global_init, Soap3dException
from .geom import PointCloud, VoxelCloud, ScanRecord, Pose
from .localfeat import LocalFeatureSet, extract_local_features
from .head import (StageFlags, HeadParams, head_forward, head_backward,
                   save_checkpoint, load_checkpoint)
from .trainer import TrainConfig, mine_tuples, lazy_triplet_loss, train
from .retrieval import (EvalConfig, EvalReport, build_db, query_topk,
                        recall_at_k, recall_at_percent, segment_sweep,
                        evaluate_sequence, cross_validate)
from .synthgen import OrchardSpec, generate_orchard

__version__ = VERSION = common.__version__

__all__ = ["global_init", "Soap3dException",
           "PointCloud", "VoxelCloud", "ScanRecord", "Pose",
           "LocalFeatureSet", "extract_local_features",
           "StageFlags", "HeadParams", "head_forward", "head_backward",
           "save_checkpoint", "load_checkpoint",
           "TrainConfig", "mine_tuples", "lazy_triplet_loss", "train",
           "EvalConfig", "EvalReport", "build_db", "query_topk",
           "recall_at_k", "recall_at_percent", "segment_sweep",
           "evaluate_sequence", "cross_validate",
           "OrchardSpec", "generate_orchard"]
