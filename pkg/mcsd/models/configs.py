"""
Experiment configuration schemas.

All schemas forbid unknown keys so a typo in a JSON config is reported
instead of silently ignored.
"""
from enum import Enum
from typing import Literal, Optional, Tuple
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class Regime(str, Enum):
    """Inference/training regime."""
    DET = "DET"
    MCDO = "MCDO"
    MCSD = "MCSD"


class ScalingConvention(str, Enum):
    """How a kept block's residual branch is rescaled."""
    INVERTED = "inverted"   # 1/q, mean-preserving
    LITERAL = "literal"     # 1/(1-q), compatibility with the printed pseudocode
    NONE = "none"           # plain stochastic depth (training)


class DropoutSchedule(str, Enum):
    CONSTANT = "constant"
    LINEAR = "linear"


class DecayScaling(str, Enum):
    SURVIVAL = "survival"
    DROP = "drop"


class DecayNormalizer(str, Enum):
    BATCH = "batch"
    DATASET = "dataset"


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", use_enum_values=False)


class McConfig(_Strict):
    """Monte Carlo prediction settings."""

    passes: int = Field(default=50, ge=1)
    base_seed: int = Field(default=0, ge=0)
    regime: Regime = Regime.MCSD
    dropout_rate: float = Field(default=0.0, ge=0.0, lt=1.0)
    dropout_schedule: DropoutSchedule = DropoutSchedule.LINEAR
    scaling: ScalingConvention = ScalingConvention.INVERTED
    keep_passes: bool = False


class TrainConfig(_Strict):
    """SGD training of the MCSD objective."""

    lr: float = Field(default=0.1, ge=0.0)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(default=1e-4, ge=0.0)
    epochs: int = Field(default=60, ge=1)
    batch_size: int = Field(default=32, ge=2)
    q_final: float = Field(default=0.5, gt=0.0, le=1.0)
    regime: Regime = Regime.MCSD
    dropout_rate: float = Field(default=0.0, ge=0.0, lt=1.0)
    dropout_schedule: DropoutSchedule = DropoutSchedule.LINEAR
    seed: int = Field(default=0, ge=0)
    lr_milestones: Tuple[float, ...] = (0.5, 0.75)
    lr_gamma: float = Field(default=0.1, gt=0.0, le=1.0)
    decay_scaling: DecayScaling = DecayScaling.SURVIVAL
    decay_normalizer: DecayNormalizer = DecayNormalizer.BATCH

    @field_validator("lr_milestones")
    @classmethod
    def milestones_in_unit_interval(cls, v: Tuple[float, ...]) -> Tuple[float, ...]:
        if any(not 0.0 < m < 1.0 for m in v):
            raise ValueError("milestones are fractions of the epoch budget in (0, 1)")
        return tuple(sorted(v))


class VerificationConfig(_Strict):
    """Uncertainty-aware verification settings."""

    passes: int = Field(default=50, ge=1)
    threshold: float = Field(default=0.5, ge=-1.0, le=1.0)
    far_target: float = Field(default=0.001, gt=0.0, lt=1.0)
    metric: Literal["cosine"] = "cosine"
    regime: Regime = Regime.MCSD
    base_seed: int = Field(default=0, ge=0)
    dropout_rate: float = Field(default=0.0, ge=0.0, lt=1.0)
    dropout_schedule: DropoutSchedule = DropoutSchedule.LINEAR
    scaling: ScalingConvention = ScalingConvention.INVERTED

    def mc_config(self) -> McConfig:
        return McConfig(
            passes=self.passes,
            base_seed=self.base_seed,
            regime=self.regime,
            dropout_rate=self.dropout_rate,
            dropout_schedule=self.dropout_schedule,
            scaling=self.scaling,
        )


class SearchConfig(_Strict):
    """Linear search over drop settings."""

    candidates: Tuple[float, ...] = Field(min_length=1)
    passes: int = Field(default=50, ge=1)
    base_seed: int = Field(default=0, ge=0)


class SplitSpec(_Strict):
    """Train/validation/test fractions."""

    train_frac: float = Field(default=0.7, ge=0.0, le=1.0)
    val_frac: float = Field(default=0.15, ge=0.0, le=1.0)
    test_frac: float = Field(default=0.15, ge=0.0, le=1.0)
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def fractions_sum_to_one(self) -> "SplitSpec":
        total = self.train_frac + self.val_frac + self.test_frac
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"split fractions must sum to 1, got {total}")
        return self


def candidate_label(regime: Regime) -> Optional[str]:
    """Name of the quantity a drop-rate search varies for ``regime``."""
    return {Regime.MCSD: "q_final", Regime.MCDO: "dropout_rate"}.get(regime)
