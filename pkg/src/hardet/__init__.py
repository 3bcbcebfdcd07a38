"""Harmonic detection losses, consistency metrics, and a toy training rig."""

from .geom import Box, Offsets, decode, decode_jacobian, encode, iou, iou_grad
from .losses import (
    BatchResult,
    HyperParams,
    LossBreakdown,
    NegativeSample,
    PositiveSample,
    batch_objective,
    cross_entropy,
    full_loc_loss,
    gradient_surface,
    harmonic_cls_grad,
    harmonic_det_loss,
    harmonic_loss,
    harmonic_reg_grad,
    hiou_loss,
    iou_loss,
    positive_sample_from_json,
    smooth_l1,
    standard_det_loss,
    tc_loss,
)
from .metrics import (
    APResult,
    Detection,
    GroundTruth,
    aic,
    average_precision,
    consistency_scatter,
    detection_from_json,
    ground_truth_from_json,
    iou_histogram,
    nms,
    refinement_gain,
)
from .harness import (
    DivergenceError,
    GradCheckReport,
    GradientCheckError,
    NumericalError,
    MatchResult,
    OptimizerConfig,
    RefinementResult,
    SceneConfig,
    SceneSet,
    ToyModel,
    TrainLog,
    finite_diff_grad,
    generate_scenes,
    match_anchors,
    model_detections,
    refinement_experiment,
    run_gradcheck,
    sample_records,
    train_toy,
)

__version__ = "0.1.0"
