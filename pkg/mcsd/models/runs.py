"""
Command run configurations.

A run configuration is the complete, validated input of one CLI command. It
is echoed verbatim into every artifact the command writes.
"""
from typing import Literal, Optional, Tuple
from pydantic import Field, field_validator, model_validator

from ..core.config import settings
from .configs import _Strict, Regime, ScalingConvention, SearchConfig, SplitSpec, TrainConfig

DataKind = Literal["moons", "blobs", "mirror", "csv"]
Part = Literal["all", "train", "val", "test"]

DEFAULT_ALPHAS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)


class DataSource(_Strict):
    """Where a dataset comes from and which part of it to use."""

    kind: DataKind = "moons"
    n: int = Field(default=600, ge=2)
    noise: float = Field(default=0.3, ge=0.0)
    centers: Tuple[Tuple[float, ...], ...] = ((-2.0, 0.0), (2.0, 0.0))
    sigma: float = Field(default=1.0, ge=0.0)
    radius: float = Field(default=2.0, gt=0.0)
    dim: int = Field(default=2, ge=1)
    path: Optional[str] = None
    seed: int = Field(default=0, ge=0)
    part: Part = "all"
    split: SplitSpec = Field(default_factory=SplitSpec)
    # optional out-of-distribution transform x * scale + shift
    shift: Optional[Tuple[float, ...]] = None
    scale: float = 1.0

    @model_validator(mode="after")
    def csv_needs_path(self) -> "DataSource":
        if self.kind == "csv" and not self.path:
            raise ValueError("csv data needs a path")
        return self


class Architecture(_Strict):
    """Network shape; input and class counts come from the data."""

    hidden_dim: int = Field(default=16, ge=1)
    num_blocks: int = Field(default=8, ge=1)
    use_batchnorm: bool = True


class _Run(_Strict):
    format_version: str = settings.FORMAT_VERSION

    @field_validator("format_version")
    @classmethod
    def supported_version(cls, v: str) -> str:
        if v != settings.FORMAT_VERSION:
            raise ValueError(f"unsupported format_version {v!r} (expected {settings.FORMAT_VERSION!r})")
        return v


class _McRun(_Run):
    """Fields shared by commands that run the Monte Carlo predictor."""

    checkpoint: str
    regime: Optional[Regime] = None
    passes: int = Field(default=settings.DEFAULT_PASSES, ge=1)
    seed: int = Field(default=settings.DEFAULT_SEED, ge=0)
    q_final: Optional[float] = Field(default=None, gt=0.0, le=1.0)
    dropout_rate: Optional[float] = Field(default=None, ge=0.0, lt=1.0)
    scaling: ScalingConvention = ScalingConvention.INVERTED


class TrainRunConfig(_Run):
    data: DataSource = Field(default_factory=DataSource)
    split: SplitSpec = Field(default_factory=SplitSpec)
    network: Architecture = Field(default_factory=Architecture)
    train: TrainConfig = Field(default_factory=TrainConfig)
    search: Optional[SearchConfig] = None
    standardize: bool = True


class EvalRunConfig(_McRun):
    # None: the test split of the checkpoint's training data
    data: Optional[DataSource] = None
    bins: int = Field(default=settings.DEFAULT_BINS, ge=1)


class OodRunConfig(_McRun):
    # None: the test split of the checkpoint's training data
    in_dist: Optional[DataSource] = None
    # None: in_dist shifted by five data standard deviations along the last axis
    ood: Optional[DataSource] = None


class VerifyRunConfig(_McRun):
    pairs_csv: Optional[str] = None
    synthetic: bool = False
    n_pairs: int = Field(default=50, ge=1)
    radius: float = Field(default=2.0, gt=0.0)
    sigma: float = Field(default=0.3, ge=0.0)
    alphas: Tuple[float, ...] = DEFAULT_ALPHAS
    far_target: float = Field(default=settings.DEFAULT_FAR, gt=0.0, lt=1.0)
    threshold: Optional[float] = Field(default=None, ge=-1.0, le=1.0)

    @field_validator("alphas")
    @classmethod
    def alphas_in_unit_interval(cls, v: Tuple[float, ...]) -> Tuple[float, ...]:
        if not v:
            raise ValueError("at least one blending factor is required")
        if any(not 0.0 <= a <= 1.0 for a in v):
            raise ValueError("blending factors must lie in [0, 1]")
        return v

    @model_validator(mode="after")
    def one_pair_source(self) -> "VerifyRunConfig":
        if self.synthetic == (self.pairs_csv is not None):
            raise ValueError("give exactly one of pairs_csv or synthetic")
        return self


class DataRunConfig(_Run):
    data: DataSource = Field(default_factory=DataSource)
    # for the mirror generator: also write this many verification pairs
    n_pairs: int = Field(default=0, ge=0)


class GradCheckRunConfig(_Run):
    input_dim: int = Field(default=3, ge=1)
    hidden_dim: int = Field(default=4, ge=1)
    num_blocks: int = Field(default=3, ge=1)
    num_classes: int = Field(default=3, ge=2)
    use_batchnorm: bool = True
    batch: int = Field(default=6, ge=2)
    weight_decay: float = Field(default=1e-3, ge=0.0)
    q_final: float = Field(default=0.5, gt=0.0, le=1.0)
    sample_gates: bool = False
    step: float = Field(default=1e-5, gt=0.0)
    seed: int = Field(default=settings.DEFAULT_SEED, ge=0)
    tolerance: float = Field(default=1e-4, gt=0.0)


RUN_CONFIGS = {
    "train": TrainRunConfig,
    "eval": EvalRunConfig,
    "ood": OodRunConfig,
    "verify": VerifyRunConfig,
    "gen-data": DataRunConfig,
    "grad-check": GradCheckRunConfig,
}
