"""
Survival schedules, gate sampling and Monte Carlo prediction.

Three regimes share one predictor:

* DET: every block on, no rescaling, a single deterministic pass.
* MCDO: every block on, fresh inverted-dropout masks after each block's
  batch normalization in every pass.
* MCSD: fresh Bernoulli block gates in every pass; kept residual branches are
  rescaled (``1/q`` by default) so each gate is mean-preserving.

Survival probabilities ``q`` are the probability a block is KEPT.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from itertools import product
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple
import logging
import math
import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator
from scipy.special import entr, softmax

from ..core.config import settings
from ..core.exceptions import UsageError
from ..models import DropoutSchedule, McConfig, NetworkSpec, Regime, ScalingConvention
from ..utils import rng
from ..utils.instrumentation import forward_passes
from .numerics import Matrix, as_matrix
from .resnet import GateMask, ResidualNet, forward

logger = logging.getLogger(__name__)

# 2^16 gate patterns is the largest exact enumeration we allow
MAX_ENUMERATION_BLOCKS = 16


class DepthSchedule(BaseModel):
    """Per-block survival probabilities ``q_l`` in (0, 1]."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    survival: Tuple[float, ...]

    @field_validator("survival")
    @classmethod
    def probabilities_in_range(cls, v: Tuple[float, ...]) -> Tuple[float, ...]:
        if not v:
            raise ValueError("a schedule needs at least one block")
        for q in v:
            if not 0.0 < q <= 1.0:
                raise ValueError(f"survival probabilities must lie in (0, 1], got {q}")
        return v

    @property
    def num_blocks(self) -> int:
        return len(self.survival)

    @classmethod
    def constant(cls, num_blocks: int, q: float) -> "DepthSchedule":
        return cls(survival=(float(q),) * num_blocks)


def linear_decay_schedule(num_blocks: int, q_final: float) -> DepthSchedule:
    """
    Linearly decaying survival: ``q_l = 1 - (l/L)(1 - q_final)``, ``l = 1..L``.

    Written as ``q_final + (1 - l/L)(1 - q_final)`` so the last block gets
    exactly ``q_final``.
    """
    if num_blocks < 1:
        raise ValueError("num_blocks must be at least 1")
    if not 0.0 < q_final <= 1.0:
        raise ValueError(f"q_final must lie in (0, 1], got {q_final}")
    L = num_blocks
    return DepthSchedule(
        survival=tuple(q_final + (1.0 - l / L) * (1.0 - q_final) for l in range(1, L + 1))
    )


def dropout_rates(num_blocks: int, rate: float,
                  schedule: DropoutSchedule = DropoutSchedule.LINEAR) -> Tuple[float, ...]:
    """Per-block dropout rates; the linear policy ramps up to ``rate`` at the last block."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if schedule == DropoutSchedule.LINEAR:
        return tuple(rate * l / num_blocks for l in range(1, num_blocks + 1))
    return (float(rate),) * num_blocks


def _scale_for(q: float, convention: ScalingConvention) -> float:
    if convention == ScalingConvention.INVERTED:
        return 1.0 / q
    if convention == ScalingConvention.LITERAL:
        if q >= 1.0:
            raise ValueError("literal 1/(1-q) scaling is undefined for survival 1")
        return 1.0 / (1.0 - q)
    return 1.0


def mask_from_gates(gates: Sequence[bool], schedule: DepthSchedule,
                    convention: ScalingConvention = ScalingConvention.INVERTED) -> GateMask:
    """Attach the convention's scale to every kept block (off blocks get 1)."""
    scales = tuple(
        _scale_for(q, convention) if g else 1.0 for g, q in zip(gates, schedule.survival)
    )
    return GateMask(tuple(bool(g) for g in gates), scales)


def sample_gates(schedule: DepthSchedule, rng_stream: np.random.Generator,
                 convention: ScalingConvention = ScalingConvention.INVERTED) -> GateMask:
    """Draw ``b_l ~ Bernoulli(q_l)`` independently for every block."""
    u = rng_stream.random(schedule.num_blocks)
    return mask_from_gates(u < np.asarray(schedule.survival), schedule, convention)


def sample_gate_matrix(schedule: DepthSchedule, passes: int, base_seed: int,
                       stream_key: Tuple[int, ...] = (rng.GATES,)) -> np.ndarray:
    """
    Gates of passes ``0..passes-1`` as a boolean (passes x L) matrix.

    Row ``t`` depends only on ``(base_seed, stream_key, t)``: the gate stream is
    consumed row by row, so asking for more passes never changes earlier rows.
    """
    u = rng.stream(base_seed, *stream_key).random((passes, schedule.num_blocks))
    return u < np.asarray(schedule.survival)


def sample_dropout_masks(spec: NetworkSpec, batch: int, rates: Sequence[float],
                         rng_stream: np.random.Generator) -> List[Optional[np.ndarray]]:
    """Inverted-dropout unit masks per block (``None`` where the rate is 0)."""
    masks: List[Optional[np.ndarray]] = []
    for rate in rates:
        if rate <= 0.0:
            masks.append(None)
            continue
        keep = 1.0 - rate
        masks.append((rng_stream.random((batch, spec.hidden_dim)) < keep) / keep)
    return masks


def mcdo_forward(net: ResidualNet, x, rate: float, rng_stream: np.random.Generator,
                 schedule: DropoutSchedule = DropoutSchedule.LINEAR) -> Matrix:
    """
    One Monte Carlo dropout pass: all blocks on, fresh unit dropout after BN.

    Raises:
        ValueError: ``rate`` outside [0, 1)
    """
    x = as_matrix(x)
    rates = dropout_rates(net.num_blocks, rate, schedule)
    masks = sample_dropout_masks(net.spec, x.shape[0], rates, rng_stream)
    return forward(net, x, GateMask.all_on(net.num_blocks), "eval", dropout=masks)


@dataclass
class PredictiveSummary:
    """Monte Carlo predictive mean, entropy and spread."""

    mean_probs: Matrix
    entropy: np.ndarray
    variance: Matrix
    passes: int
    regime: str
    seed: int
    per_pass_probs: Optional[np.ndarray] = None

    @property
    def predicted_class(self) -> np.ndarray:
        # argmax returns the lowest index on ties
        return np.argmax(self.mean_probs, axis=1)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "mean_probs": self.mean_probs.tolist(),
            "entropy": self.entropy.tolist(),
            "T": self.passes,
            "regime": self.regime,
            "seed": self.seed,
        }


def predictive_entropy(probs: Matrix) -> np.ndarray:
    """Natural-log entropy of each row, clipped to ``[0, ln C]``."""
    h = entr(probs).sum(axis=1)
    return np.clip(h, 0.0, math.log(probs.shape[1]))


def _summarize(stacked: np.ndarray, regime: str, seed: int, keep: bool) -> PredictiveSummary:
    mean = stacked.mean(axis=0)
    return PredictiveSummary(
        mean_probs=mean,
        entropy=predictive_entropy(mean),
        variance=stacked.var(axis=0),
        passes=stacked.shape[0],
        regime=regime,
        seed=seed,
        per_pass_probs=stacked if keep else None,
    )


def map_passes(fn: Callable, items: Sequence, workers: Optional[int]) -> List:
    workers = workers or settings.THREADS
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        # map preserves input order, so the reduction order never depends on scheduling
        return list(pool.map(fn, items))


def pass_masks(schedule: DepthSchedule, cfg: McConfig,
               stream_key: Tuple[int, ...] = (rng.GATES,)) -> Tuple[List[GateMask], np.ndarray]:
    """Distinct gate masks of an MCSD run and, per pass, the index of its mask."""
    gates = sample_gate_matrix(schedule, cfg.passes, cfg.base_seed, stream_key)
    unique, inverse = np.unique(gates, axis=0, return_inverse=True)
    masks = [mask_from_gates(row, schedule, cfg.scaling) for row in unique]
    return masks, np.asarray(inverse).reshape(-1)


def mc_predict(net: ResidualNet, x, schedule: Optional[DepthSchedule], cfg: McConfig,
               workers: Optional[int] = None) -> PredictiveSummary:
    """
    Monte Carlo predictive distribution over ``cfg.passes`` stochastic passes.

    Each pass's randomness is a pure function of ``(cfg.base_seed, pass)``;
    passes may run on several threads but are reduced in pass order. MCSD
    passes that draw the same gate pattern share one forward evaluation.
    """
    x = as_matrix(x)
    regime = Regime(cfg.regime)
    L = net.num_blocks
    executed = forward_passes.labels(regime=regime.value)

    if regime == Regime.DET:
        executed.inc()
        probs = softmax(forward(net, x, GateMask.all_on(L), "eval"), axis=1)
        stacked = np.broadcast_to(probs, (cfg.passes,) + probs.shape)
        return PredictiveSummary(
            mean_probs=probs,
            entropy=predictive_entropy(probs),
            variance=np.zeros_like(probs),
            passes=cfg.passes,
            regime=regime.value,
            seed=cfg.base_seed,
            per_pass_probs=np.array(stacked) if cfg.keep_passes else None,
        )

    if regime == Regime.MCSD:
        if schedule is None or schedule.num_blocks != L:
            raise UsageError(f"MCSD needs a survival schedule with {L} blocks")
        masks, inverse = pass_masks(schedule, cfg)
        executed.inc(len(masks))
        outputs = map_passes(lambda m: softmax(forward(net, x, m, "eval"), axis=1), masks, workers)
        stacked = np.stack(outputs)[inverse]
    else:
        rates = dropout_rates(L, cfg.dropout_rate, cfg.dropout_schedule)

        def one_pass(t: int) -> np.ndarray:
            masks = sample_dropout_masks(net.spec, x.shape[0], rates,
                                         rng.stream(cfg.base_seed, rng.DROPOUT, t))
            return softmax(forward(net, x, GateMask.all_on(L), "eval", dropout=masks), axis=1)

        stacked = np.stack(map_passes(one_pass, list(range(cfg.passes)), workers))
        executed.inc(cfg.passes)

    summary = _summarize(stacked, regime.value, cfg.base_seed, cfg.keep_passes)
    logger.debug("mc_predict", extra={"regime": regime.value, "passes": cfg.passes,
                                      "batch": x.shape[0]})
    return summary


def gate_patterns(schedule: DepthSchedule,
                  convention: ScalingConvention = ScalingConvention.INVERTED
                  ) -> Iterator[Tuple[GateMask, float]]:
    """
    Every gate pattern with its probability ``prod q^b (1-q)^(1-b)``.

    Patterns of probability zero (a block with ``q = 1`` switched off) are
    omitted.

    Raises:
        UsageError: more than ``MAX_ENUMERATION_BLOCKS`` blocks
    """
    L = schedule.num_blocks
    if L > MAX_ENUMERATION_BLOCKS:
        raise UsageError(f"exact enumeration refused for {L} blocks (limit {MAX_ENUMERATION_BLOCKS})")
    for bits in product((False, True), repeat=L):
        weight = 1.0
        for on, q in zip(bits, schedule.survival):
            weight *= q if on else (1.0 - q)
        if weight == 0.0:
            continue
        yield mask_from_gates(bits, schedule, convention), weight


def enumerate_expectation(schedule: DepthSchedule, fn: Callable[[GateMask], np.ndarray],
                          convention: ScalingConvention = ScalingConvention.INVERTED) -> np.ndarray:
    """Exact expectation of ``fn(mask)`` under the gate distribution."""
    total = None
    for mask, weight in gate_patterns(schedule, convention):
        term = weight * fn(mask)
        total = term if total is None else total + term
    return total


def enumerate_predict(net: ResidualNet, x, schedule: DepthSchedule,
                      convention: ScalingConvention = ScalingConvention.INVERTED) -> PredictiveSummary:
    """Exact MCSD predictive mixture over all ``2^L`` gate patterns."""
    x = as_matrix(x)
    if schedule.num_blocks != net.num_blocks:
        raise UsageError("schedule and network disagree on the number of blocks")
    patterns = list(gate_patterns(schedule, convention))
    weights = np.array([w for _, w in patterns])
    probs = np.stack([softmax(forward(net, x, m, "eval"), axis=1) for m, _ in patterns])
    mean = np.tensordot(weights, probs, axes=1)
    variance = np.tensordot(weights, (probs - mean) ** 2, axes=1)
    return PredictiveSummary(
        mean_probs=mean,
        entropy=predictive_entropy(mean),
        variance=variance,
        passes=len(patterns),
        regime="EXACT",
        seed=0,
    )
