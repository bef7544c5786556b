"""Result schemas written as JSON artifacts."""
from typing import List, Optional
from pydantic import BaseModel, Field

from .configs import Regime


class ReliabilityBin(BaseModel):
    """One confidence interval ``(lo, hi]`` of a reliability diagram."""

    lo: float
    hi: float
    count: int = Field(ge=0)
    accuracy: float = Field(ge=0.0, le=1.0)
    confidence: float = Field(ge=0.0, le=1.0)


class CalibrationReport(BaseModel):
    test_error: float = Field(ge=0.0)
    nll: float = Field(ge=0.0)
    brier: float = Field(ge=0.0)
    ece: float = Field(ge=0.0)
    mce: float = Field(ge=0.0)
    bins: List[ReliabilityBin]
    num_bins: int = Field(ge=1)
    num_passes: int = Field(ge=1)
    mean_entropy: float = Field(ge=0.0)


class TrainReport(BaseModel):
    """Per-epoch training history."""

    train_loss: List[float] = Field(default_factory=list)
    eval_error: List[float] = Field(default_factory=list)
    checkpoint: Optional[str] = None
    # Logged but kept out of artifacts so reruns are byte-identical
    wall_clock: float = Field(default=0.0, exclude=True)


class SearchRow(BaseModel):
    candidate: float
    val_nll: float
    val_error: float


class SearchResult(BaseModel):
    regime: Regime
    parameter: str
    best: float
    rows: List[SearchRow]


class MorphPoint(BaseModel):
    alpha: float = Field(ge=0.0, le=1.0)
    attack_success_rate: float = Field(ge=0.0, le=1.0)
    accuracy: float = Field(ge=0.0, le=1.0)
    mean_entropy: float = Field(ge=0.0, le=1.0)


class MorphSweep(BaseModel):
    """Attack success and verification entropy as the blend factor varies."""

    threshold: float
    passes: int
    points: List[MorphPoint]

    @property
    def alphas(self) -> List[float]:
        return [p.alpha for p in self.points]

    @property
    def mean_entropy(self) -> List[float]:
        return [p.mean_entropy for p in self.points]

    @property
    def accuracy(self) -> List[float]:
        return [p.accuracy for p in self.points]
