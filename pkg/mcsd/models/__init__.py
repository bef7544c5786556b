"""
Pydantic schemas for configurations and reports.
"""
from .network import NetworkSpec
from .configs import (
    Regime,
    ScalingConvention,
    DropoutSchedule,
    DecayScaling,
    DecayNormalizer,
    McConfig,
    TrainConfig,
    VerificationConfig,
    SearchConfig,
    SplitSpec,
)
from .reports import (
    ReliabilityBin,
    CalibrationReport,
    TrainReport,
    SearchRow,
    SearchResult,
    MorphPoint,
    MorphSweep,
)
from .runs import (
    DataSource,
    Architecture,
    TrainRunConfig,
    EvalRunConfig,
    OodRunConfig,
    VerifyRunConfig,
    DataRunConfig,
    GradCheckRunConfig,
    RUN_CONFIGS,
)

__all__ = [
    "NetworkSpec",
    "Regime",
    "ScalingConvention",
    "DropoutSchedule",
    "DecayScaling",
    "DecayNormalizer",
    "McConfig",
    "TrainConfig",
    "VerificationConfig",
    "SearchConfig",
    "SplitSpec",
    "ReliabilityBin",
    "CalibrationReport",
    "TrainReport",
    "SearchRow",
    "SearchResult",
    "MorphPoint",
    "MorphSweep",
    "DataSource",
    "Architecture",
    "TrainRunConfig",
    "EvalRunConfig",
    "OodRunConfig",
    "VerifyRunConfig",
    "DataRunConfig",
    "GradCheckRunConfig",
    "RUN_CONFIGS",
]
