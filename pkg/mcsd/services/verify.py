"""
Uncertainty-aware verification.

Each side of a pair is embedded ``T`` times under sampled subnetworks (or
dropout masks), every one of the ``T x T`` cosine similarities is compared
with the threshold, and the fraction of accepting comparisons ``y`` gives
both the decision (majority) and its binary entropy.

The sign convention is similarity-based throughout: a comparison accepts
iff ``similarity > threshold``.
"""
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union
import logging
import math
import numpy as np
from scipy.special import entr
from sklearn.metrics.pairwise import cosine_similarity

from ..core.exceptions import ShapeError, UsageError
from ..models import McConfig, MorphPoint, MorphSweep, Regime, VerificationConfig
from ..utils import rng
from ..utils.artifacts import write_csv, write_json_lines
from .numerics import Matrix, as_matrix
from .resnet import GateMask, ResidualNet, embed
from .stochastic import (
    DepthSchedule,
    dropout_rates,
    map_passes,
    pass_masks,
    sample_dropout_masks,
)

logger = logging.getLogger(__name__)

ACCEPT = "accept"
REJECT = "reject"

# Stream ids for the two sides of a comparison
QUERY_SIDE = 0
REFERENCE_SIDE = 1


def binary_entropy(y: float) -> float:
    """
    Entropy in bits of a Bernoulli(y) variable, with ``0 log 0 = 0``.

    Raises:
        ValueError: ``y`` outside [0, 1]
    """
    y = float(y)
    if not 0.0 <= y <= 1.0:
        raise ValueError(f"binary entropy needs y in [0, 1], got {y}")
    # 1 - hi is exact for hi >= 0.5, so y and 1 - y give bit-identical results
    hi = max(y, 1.0 - y)
    return float((entr(hi) + entr(1.0 - hi)) / math.log(2.0))


def select_threshold(impostor_sims: Iterable[float], far_target: float) -> float:
    """
    Largest threshold whose false acceptance rate on ``impostor_sims`` is at
    most ``far_target``.

    With ``m = floor(n * far_target)`` the threshold is the ``(m+1)``-th
    largest impostor similarity, so at most ``m`` impostors score strictly
    above it.

    Raises:
        UsageError: empty impostor set, or ``m >= n`` (vacuous constraint)
    """
    sims = np.asarray(list(impostor_sims), dtype=np.float64).reshape(-1)
    n = sims.size
    if n == 0:
        raise UsageError("impostor similarity set is empty")
    if not 0.0 <= far_target <= 1.0:
        raise ValueError(f"far_target must lie in [0, 1], got {far_target}")
    # tolerance keeps e.g. 100 * 0.29 from flooring to 28
    m = int(math.floor(n * far_target + 1e-9))
    if m >= n:
        raise UsageError(f"far_target {far_target} accepts every one of {n} impostors")
    ordered = np.sort(sims)[::-1]
    return float(ordered[m])


def false_accept_rate(impostor_sims: Iterable[float], threshold: float) -> float:
    sims = np.asarray(list(impostor_sims), dtype=np.float64).reshape(-1)
    return float(np.mean(sims > threshold)) if sims.size else 0.0


def mc_embed(net: ResidualNet, x, schedule: Optional[DepthSchedule], cfg: McConfig,
             side: int = QUERY_SIDE, workers: Optional[int] = None) -> np.ndarray:
    """
    ``T`` unit-norm embeddings per input, shape ``(T, batch, hidden)``.

    Pass ``t`` of stream ``side`` is a pure function of
    ``(cfg.base_seed, side, t)``.
    """
    x = as_matrix(x)
    regime = Regime(cfg.regime)
    L = net.num_blocks

    if regime == Regime.DET:
        single = embed(net, x, GateMask.all_on(L)).vectors
        return np.repeat(single[np.newaxis], cfg.passes, axis=0)

    if regime == Regime.MCSD:
        if schedule is None or schedule.num_blocks != L:
            raise UsageError(f"MCSD needs a survival schedule with {L} blocks")
        masks, inverse = pass_masks(schedule, cfg, stream_key=(rng.VERIFY, side))
        vectors = map_passes(lambda m: embed(net, x, m).vectors, masks, workers)
        return np.stack(vectors)[inverse]

    rates = dropout_rates(L, cfg.dropout_rate, cfg.dropout_schedule)

    def one_pass(t: int) -> Matrix:
        masks = sample_dropout_masks(net.spec, x.shape[0], rates,
                                     rng.stream(cfg.base_seed, rng.VERIFY, side, t))
        return embed(net, x, GateMask.all_on(L), dropout=masks).vectors

    return np.stack(map_passes(one_pass, list(range(cfg.passes)), workers))


def pair_similarities(emb_a: np.ndarray, emb_b: np.ndarray) -> np.ndarray:
    """
    All ``T x T`` cosine similarities for each pair, shape ``(pairs, T, T)``.

    ``emb_a`` and ``emb_b`` are ``mc_embed`` outputs of equal batch size.
    """
    if emb_a.shape[1] != emb_b.shape[1]:
        raise ShapeError(f"{emb_a.shape[1]} queries but {emb_b.shape[1]} references")
    sims = np.stack([
        cosine_similarity(emb_a[:, i, :], emb_b[:, i, :]) for i in range(emb_a.shape[1])
    ])
    return np.clip(sims, -1.0, 1.0)


@dataclass
class VerificationTrial:
    """Outcome of one Monte Carlo verification."""

    accept_fraction: float
    entropy: float
    decision: str
    threshold: float
    pair_scores: Optional[np.ndarray] = None

    @property
    def accepted(self) -> bool:
        return self.decision == ACCEPT

    def to_dict(self) -> Dict[str, Any]:
        return {
            "accept_fraction": self.accept_fraction,
            "entropy": self.entropy,
            "decision": self.decision,
            "threshold": self.threshold,
        }


def trial_from_scores(scores: np.ndarray, threshold: float, keep_scores: bool = False) -> VerificationTrial:
    y = float(np.mean(scores > threshold))
    return VerificationTrial(
        accept_fraction=y,
        entropy=binary_entropy(y),
        decision=ACCEPT if y > 0.5 else REJECT,
        threshold=threshold,
        pair_scores=scores if keep_scores else None,
    )


def verify_pairs(net: ResidualNet, xs_a, xs_b, schedule: Optional[DepthSchedule],
                 cfg: VerificationConfig, symmetric: bool = False, keep_scores: bool = False,
                 workers: Optional[int] = None) -> List[VerificationTrial]:
    """
    One trial per row pair of ``xs_a`` and ``xs_b``.

    Queries and references draw from separate pass streams unless
    ``symmetric`` is set, in which case both sides see the same subnetworks
    and swapping the sides leaves every accept fraction unchanged.
    """
    xs_a, xs_b = as_matrix(xs_a, "query"), as_matrix(xs_b, "reference")
    if xs_a.shape != xs_b.shape:
        raise ShapeError(f"query shape {xs_a.shape} differs from reference shape {xs_b.shape}")
    mc = cfg.mc_config()
    emb_a = mc_embed(net, xs_a, schedule, mc, QUERY_SIDE, workers)
    emb_b = mc_embed(net, xs_b, schedule, mc, QUERY_SIDE if symmetric else REFERENCE_SIDE, workers)
    sims = pair_similarities(emb_a, emb_b)
    return [trial_from_scores(s, cfg.threshold, keep_scores) for s in sims]


def mc_verify(net: ResidualNet, x_a, x_b, schedule: Optional[DepthSchedule],
              cfg: VerificationConfig, symmetric: bool = False,
              keep_scores: bool = False) -> VerificationTrial:
    """Verify a single pair of inputs."""
    x_a, x_b = as_matrix(x_a, "query"), as_matrix(x_b, "reference")
    if x_a.shape[0] != 1 or x_b.shape[0] != 1:
        raise ShapeError("mc_verify compares exactly one query with one reference")
    return verify_pairs(net, x_a, x_b, schedule, cfg, symmetric, keep_scores)[0]


def impostor_similarities(net: ResidualNet, xs_a, xs_b, schedule: Optional[DepthSchedule],
                          cfg: VerificationConfig, workers: Optional[int] = None) -> np.ndarray:
    """Pooled ``T x T`` similarities of known impostor pairs (threshold calibration set)."""
    xs_a, xs_b = as_matrix(xs_a, "query"), as_matrix(xs_b, "reference")
    if xs_a.shape != xs_b.shape:
        raise ShapeError(f"query shape {xs_a.shape} differs from reference shape {xs_b.shape}")
    if xs_a.shape[0] == 0:
        raise UsageError("impostor set is empty")
    mc = cfg.mc_config()
    emb_a = mc_embed(net, xs_a, schedule, mc, QUERY_SIDE, workers)
    emb_b = mc_embed(net, xs_b, schedule, mc, REFERENCE_SIDE, workers)
    return pair_similarities(emb_a, emb_b).reshape(-1)


def blend(accomplices: Matrix, impostors: Matrix, alpha: float) -> Matrix:
    """Input-space morph ``alpha * accomplice + (1 - alpha) * impostor``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"blending factor must lie in [0, 1], got {alpha}")
    return alpha * accomplices + (1.0 - alpha) * impostors


@dataclass
class MorphTrial:
    """Both comparisons of one morphed template."""

    alpha: float
    pair: int
    vs_accomplice: VerificationTrial
    vs_impostor: VerificationTrial

    @property
    def attack_succeeded(self) -> bool:
        return self.vs_accomplice.accepted and self.vs_impostor.accepted

    def records(self) -> List[Dict[str, Any]]:
        return [
            {"alpha": self.alpha, "pair": self.pair, "reference": name, **trial.to_dict()}
            for name, trial in (("accomplice", self.vs_accomplice), ("impostor", self.vs_impostor))
        ]


def morph_sweep(net: ResidualNet, accomplices, impostors, alphas: Sequence[float],
                schedule: Optional[DepthSchedule], cfg: VerificationConfig,
                workers: Optional[int] = None) -> Tuple[MorphSweep, List[MorphTrial]]:
    """
    Attack success and verification entropy of morphed templates.

    For every blending factor the template of pair ``i`` is compared with
    accomplice ``i`` and with impostor ``i``; the attack succeeds when both
    comparisons accept.

    Returns:
        (MorphSweep, list of MorphTrial)
    """
    accomplices = as_matrix(accomplices, "accomplices")
    impostors = as_matrix(impostors, "impostors")
    if accomplices.shape != impostors.shape:
        raise ShapeError(f"accomplice shape {accomplices.shape} differs from impostor shape {impostors.shape}")
    if accomplices.shape[0] == 0:
        raise UsageError("no morph pairs")

    mc = cfg.mc_config()
    # reference embeddings do not depend on alpha
    ref_accomplice = mc_embed(net, accomplices, schedule, mc, REFERENCE_SIDE, workers)
    ref_impostor = mc_embed(net, impostors, schedule, mc, REFERENCE_SIDE, workers)

    points: List[MorphPoint] = []
    trials: List[MorphTrial] = []
    for alpha in alphas:
        template = mc_embed(net, blend(accomplices, impostors, alpha), schedule, mc, QUERY_SIDE, workers)
        vs_acc = [trial_from_scores(s, cfg.threshold) for s in pair_similarities(template, ref_accomplice)]
        vs_imp = [trial_from_scores(s, cfg.threshold) for s in pair_similarities(template, ref_impostor)]
        batch = [MorphTrial(float(alpha), i, a, b) for i, (a, b) in enumerate(zip(vs_acc, vs_imp))]
        success = float(np.mean([t.attack_succeeded for t in batch]))
        entropy = float(np.mean([t.entropy for t in vs_acc + vs_imp]))
        points.append(MorphPoint(alpha=float(alpha), attack_success_rate=success,
                                 accuracy=1.0 - success, mean_entropy=min(entropy, 1.0)))
        trials.extend(batch)
        logger.debug("morph point", extra={"alpha": alpha, "success": success, "entropy": entropy})

    sweep = MorphSweep(threshold=cfg.threshold, passes=cfg.passes, points=points)
    return sweep, trials


def write_sweep_csv(sweep: MorphSweep, path: Union[str, Path]) -> Path:
    rows = ((p.alpha, p.attack_success_rate, p.mean_entropy, p.accuracy) for p in sweep.points)
    return write_csv(path, ["alpha", "attack_success_rate", "mean_entropy", "accuracy"], rows)


def write_trials_jsonl(trials: Sequence[MorphTrial], path: Union[str, Path]) -> Path:
    return write_json_lines(path, (r for t in trials for r in t.records()))
