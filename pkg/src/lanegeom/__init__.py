"""Lane geometry engine: overlap, assignment, score fusion, refinement,
post-processing and evaluation for row-anchored lane detectors."""

from .assign import AssignConfig, AssignmentResult, cost_matrix, dynamic_assign
from .calibrate import CriConfig, cri, pearson, ranking_quality
from .errors import ConfigError, LaneGeomError, ParseError
from .evaluate import EvalConfig, EvalReport, f1_report, hungarian, mask_iou, rasterize
from .geometry import Lane, LanePrior, SampleGrid, build_grid, decode_polyline
from .losses import LossTerms, LossWeights, finite_diff_check, total_loss
from .overlap import WidthModel, lane_iou, lane_iou_grad, pairwise_iou
from .postprocess import Detection, PostprocessConfig, nms, run_pipeline
from .refine import AglrParams, ModulationConfig, aglr_backward, aglr_forward, modulate

__version__ = "0.1.0"
