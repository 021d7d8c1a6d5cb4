"""Direction-aware collaborative perception simulator and library."""

from .comms import ScorerParams, clip_queries, score_mlp, score_reference
from .direction import DirectionMask, DirectionScores, compute_mask
from .evaluate import average_precision, pd_average_precision, run_method, sweep
from .fusion import AttentionParams, decode, dsa_weights, fuse
from .geometry import RotatedBox, SectorPartition, iou, sector_of
from .grid import GridSpec
from .learn import dw_loss, dw_loss_gradient, train_scorer
from .pipeline import RunSettings, prepare_scene, run_pipeline
from .scenario import ScenarioConfig, ScenarioWorld, generate, observe, rsu_observe

__version__ = "0.1.0"

__all__ = [
    "AttentionParams", "DirectionMask", "DirectionScores", "GridSpec",
    "RotatedBox", "RunSettings", "ScenarioConfig", "ScenarioWorld",
    "ScorerParams", "SectorPartition", "average_precision", "clip_queries",
    "compute_mask", "decode", "dsa_weights", "dw_loss", "dw_loss_gradient",
    "fuse", "generate", "iou", "observe", "pd_average_precision",
    "prepare_scene", "rsu_observe", "run_method", "run_pipeline",
    "score_mlp", "score_reference", "sector_of", "sweep", "train_scorer",
]
