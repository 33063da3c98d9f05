"""elastinet: train one elastic weight-shared supernet, then specialize
sub-networks for arbitrary latency budgets with predictor-guided search."""

from .space import (
    ArchConfig,
    ArchSpace,
    count_subnetworks,
    desk_space,
    max_arch,
    mobile_space,
    random_arch,
    transform_param_count,
    uniform_arch,
)
from .supernet import (
    ElasticMBConv,
    SubNet,
    Supernet,
    channel_importance,
    effective_kernel,
    extract_subnet,
    recalibrate_bn,
    sort_channels,
)
from .training import (
    PsSchedule,
    PsStage,
    ScheduleOverrides,
    TrainReport,
    build_ps_schedule,
    evaluate,
    kd_loss,
    probe_configs,
    run_schedule,
    sample_arch,
    train_naive,
    train_stage,
)
from .twins import (
    AccPredictor,
    LatencyTable,
    arch_macs,
    collect_pairs,
    encode_arch,
    predict_accuracy,
    predict_latency,
    synth_latency_table,
    train_acc_predictor,
)
from .search import (
    InfeasibleConstraintError,
    SearchParams,
    SearchResult,
    evolve,
    exhaustive_search,
    mutate,
)

__all__ = [
    "ArchConfig", "ArchSpace", "count_subnetworks", "desk_space", "max_arch",
    "mobile_space", "random_arch", "transform_param_count", "uniform_arch",
    "ElasticMBConv", "SubNet", "Supernet", "channel_importance",
    "effective_kernel", "extract_subnet", "recalibrate_bn", "sort_channels",
    "PsSchedule", "PsStage", "ScheduleOverrides", "TrainReport",
    "build_ps_schedule", "evaluate", "kd_loss", "probe_configs",
    "run_schedule", "sample_arch", "train_naive", "train_stage",
    "AccPredictor", "LatencyTable", "arch_macs", "collect_pairs",
    "encode_arch", "predict_accuracy", "predict_latency",
    "synth_latency_table", "train_acc_predictor",
    "InfeasibleConstraintError", "SearchParams", "SearchResult", "evolve",
    "exhaustive_search", "mutate",
]

__version__ = "0.1.0"
