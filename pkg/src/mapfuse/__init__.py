"""Desk-scale cooperative perception: map fusion, federated training,
distillation and benchmarking for a simulated vehicle fleet."""

from mapfuse.geometry import (
    IDENTITY_POSE,
    ObjectState,
    Pose,
    iou_3d,
    iou_bev,
    transform_to_global,
    transform_to_local,
)
from mapfuse.association import AssociationMatrix, ClusterConfig, cluster_detections
from mapfuse.fusion import (
    FusionConfig,
    GlobalMap,
    LocalMap,
    ScoredDetection,
    three_stage_fuse,
)
from mapfuse.fedlearn import (
    LabelSet,
    ModelParams,
    ModelSpec,
    SensorFrame,
    TrainConfig,
    default_init_params,
    fedavg,
    load_checkpoint,
    loss,
    predict,
    run_federated,
    save_checkpoint,
    training_curve_csv,
)
from mapfuse.simworld import (
    DetectorNoiseSpec,
    ScenarioConfig,
    SensorSpec,
    generate_scenario,
    sense,
)
from mapfuse.distill import (
    RoadSideUnit,
    TeacherRegistry,
    distill_labels,
    full_coverage_registry,
    run_edfl,
    run_perfect_fl,
    select_students,
)
from mapfuse.evalbench import EvalReport, average_precision, match_detections
from mapfuse.orchestrator import (
    RunConfig,
    TeacherSpec,
    decode_message,
    default_benchmark_config,
    encode_message,
    run_config_from_dict,
    run_experiment,
    run_frame,
)

__version__ = "0.1.0"

__all__ = [
    "IDENTITY_POSE",
    "ObjectState",
    "Pose",
    "iou_3d",
    "iou_bev",
    "transform_to_global",
    "transform_to_local",
    "AssociationMatrix",
    "ClusterConfig",
    "cluster_detections",
    "FusionConfig",
    "GlobalMap",
    "LocalMap",
    "ScoredDetection",
    "three_stage_fuse",
    "LabelSet",
    "ModelParams",
    "ModelSpec",
    "SensorFrame",
    "TrainConfig",
    "default_init_params",
    "fedavg",
    "load_checkpoint",
    "loss",
    "predict",
    "run_federated",
    "save_checkpoint",
    "training_curve_csv",
    "DetectorNoiseSpec",
    "ScenarioConfig",
    "SensorSpec",
    "generate_scenario",
    "sense",
    "RoadSideUnit",
    "TeacherRegistry",
    "distill_labels",
    "full_coverage_registry",
    "run_edfl",
    "run_perfect_fl",
    "select_students",
    "EvalReport",
    "average_precision",
    "match_detections",
    "RunConfig",
    "TeacherSpec",
    "decode_message",
    "default_benchmark_config",
    "encode_message",
    "run_config_from_dict",
    "run_experiment",
    "run_frame",
    "__version__",
]
