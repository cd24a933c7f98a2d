"""LiDAR place recognition: range-image projection, an encoder with stacked
channel attention producing place descriptors, pair training, and exact
cosine kNN loop-closure retrieval with precision/recall/F1 evaluation."""

from .data import (
    LoopGroundTruth,
    PairSample,
    PointCloud,
    Sequence,
    SyntheticConfig,
    Trajectory,
    build_ground_truth,
    generate_synthetic_sequence,
    load_kitti_scan,
    load_poses,
    load_sequence,
    sample_pairs,
    synthetic_sequence,
)
from .estimator import LoopClosureDetector, PlaceDescriptorNet, RangeProjector
from .evaluation import (
    EvalProtocol,
    Metrics,
    RecallCurve,
    ablation_grid,
    cross_validate,
    evaluate_model,
    evaluate_top1,
    measure_fps,
    recall_at_n,
)
from .model import (
    Descriptor,
    ModelConfig,
    ModelState,
    attention_layer_forward,
    attention_network_forward,
    describe,
    encoder_forward,
    init_model,
    load_checkpoint,
    output_head,
    save_checkpoint,
)
from .projection import ProjectionConfig, RangeImage, project, yaw_shift_reference
from .retrieval import DescriptorMap, MatchResult, build_map, load_map, query, save_map
from .tensor import Parameter, Tensor, no_grad, precision, set_precision
from .training import TrainConfig, TrainReport, margin_sweep, pair_loss, prepare_sequence, train

__version__ = "0.1.0"
