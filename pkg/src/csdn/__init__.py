"""Context-gated scale-adaptive detection head, training and evaluation."""

from .attention import (
    DeformableParams,
    FeaturePyramid,
    GateParams,
    GateWeights,
    Level,
    MultiHeadParams,
    QuerySet,
    block_attention,
    deformable_attention,
    gated_fusion,
    neighbor_attention,
    self_attention,
)
from .evaluation import EvalResult, average_precision, evaluate, match_detections
from .geometry import (
    Box,
    Detection,
    NeighborMask,
    box_to_corners,
    corners_to_box,
    giou,
    iou,
    neighbor_mask,
    nms,
)
from .head import CSDNHead, HeadConfig, HeadOutput, parse_topology
from .tensor import (
    Parameter,
    Tensor,
    backward,
    bilinear_gather,
    bilinear_sample,
    grad_check,
    linear,
    make_rng,
    masked_softmax,
    matmul,
    no_grad,
)
from .training import (
    Assignment,
    DetectionLossConfig,
    LossBreakdown,
    OptimConfig,
    adamw_step,
    detection_loss,
    focal_loss,
    hungarian_match,
    match_cost,
    train,
)

__version__ = "0.1.0"
