"""Residual network architecture description."""
from pydantic import BaseModel, ConfigDict, Field


class NetworkSpec(BaseModel):
    """Shape of a residual MLP: stem, ``num_blocks`` residual blocks, softmax head."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    input_dim: int = Field(ge=1)
    hidden_dim: int = Field(ge=1)
    num_blocks: int = Field(ge=1)
    num_classes: int = Field(ge=2)
    use_batchnorm: bool = True
    bn_eps: float = Field(default=1e-5, gt=0.0)
    bn_momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
