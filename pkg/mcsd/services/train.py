"""
Training under the MCSD objective.

The objective is the mean cross-entropy of a mini-batch evaluated with the
batch's sampled gates, plus weight decay on the linear weights where each
block's decay is scaled by its survival probability:

    loss = CE + lambda * sum_l q_l * ||M_l||^2 / N + lambda * ||W_stem, W_head||^2 / N

Kept blocks are not rescaled during training; rescaling is a test-time
concern of the Monte Carlo predictor.
"""
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union
import logging
import time
import numpy as np

from ..core.exceptions import TrainingDivergedError, UsageError
from ..core.logging import PROGRESS_LOGGER
from ..models import (
    DecayNormalizer,
    DecayScaling,
    McConfig,
    NetworkSpec,
    Regime,
    ScalingConvention,
    SearchResult,
    SearchRow,
    TrainConfig,
    TrainReport,
)
from ..models.configs import candidate_label
from ..utils import rng
from ..utils.instrumentation import train_steps
from .data import Dataset
from .metrics import PredictionSet, nll, test_error
from .numerics import Evaluation, Gradient, GradCheckResult, Matrix, Node, Tape, as_matrix, backward, grad_check
from .resnet import GateMask, ResidualNet, forward, save_checkpoint, trace_forward
from .stochastic import (
    DepthSchedule,
    dropout_rates,
    linear_decay_schedule,
    mc_predict,
    sample_dropout_masks,
    sample_gates,
)

logger = logging.getLogger(__name__)
progress_logger = logging.getLogger(PROGRESS_LOGGER)


def decay_coefficients(net: ResidualNet, weight_decay: float, schedule: Optional[DepthSchedule],
                       normalizer: int,
                       scaling: DecayScaling = DecayScaling.SURVIVAL) -> Dict[str, float]:
    """Per-weight-matrix coefficient of ``||W||^2`` in the objective."""
    if normalizer < 1:
        raise ValueError("decay normalizer must be positive")
    coefs = {
        "stem.weight": weight_decay / normalizer,
        "head.weight": weight_decay / normalizer,
    }
    for l in range(net.num_blocks):
        q = 1.0 if schedule is None else schedule.survival[l]
        factor = q if scaling == DecayScaling.SURVIVAL else 1.0 - q
        for name in net.block_weight_names(l):
            coefs[name] = weight_decay * factor / normalizer
    return coefs


def build_objective(tape: Tape, net: ResidualNet, x: Matrix, labels: np.ndarray, mask: GateMask,
                    weight_decay: float, schedule: Optional[DepthSchedule],
                    normalizer: Optional[int] = None,
                    scaling: DecayScaling = DecayScaling.SURVIVAL,
                    dropout: Optional[Sequence[Optional[np.ndarray]]] = None,
                    update_stats: bool = True) -> Node:
    """Record the MCSD objective on ``tape`` and return the scalar loss node."""
    trace = trace_forward(net, x, mask, "train", tape, dropout, update_stats)
    terms = [tape.softmax_cross_entropy(trace.logits, labels)]
    if weight_decay > 0.0:
        n = normalizer if normalizer is not None else x.shape[0]
        for name, coef in decay_coefficients(net, weight_decay, schedule, n, scaling).items():
            terms.append(tape.sum_of_squares(tape.param(name, net.params[name]), coef))
    return tape.total(terms)


def mcsd_loss(net: ResidualNet, x, labels, mask: GateMask, weight_decay: float,
              schedule: Optional[DepthSchedule], normalizer: Optional[int] = None,
              scaling: DecayScaling = DecayScaling.SURVIVAL,
              dropout: Optional[Sequence[Optional[np.ndarray]]] = None) -> float:
    """
    Value of the MCSD objective on one batch.

    Batch statistics are used for normalization but the running statistics
    are left untouched. ``normalizer`` defaults to the batch size.
    """
    tape = Tape(record=False)
    loss = build_objective(tape, net, as_matrix(x), np.asarray(labels), mask, weight_decay,
                           schedule, normalizer, scaling, dropout, update_stats=False)
    return float(loss.value)


def loss_and_gradient(net: ResidualNet, x: Matrix, labels: np.ndarray, mask: GateMask,
                      weight_decay: float, schedule: Optional[DepthSchedule],
                      normalizer: Optional[int] = None,
                      scaling: DecayScaling = DecayScaling.SURVIVAL,
                      dropout: Optional[Sequence[Optional[np.ndarray]]] = None,
                      update_stats: bool = True) -> Tuple[float, Gradient, bytes]:
    tape = Tape()
    # gated-off blocks never reach the tape; registering every leaf gives them zero gradients
    for name, value in net.params.items():
        tape.param(name, value)
    loss = build_objective(tape, net, x, labels, mask, weight_decay, schedule,
                           normalizer, scaling, dropout, update_stats)
    grads = backward(tape, loss, params=list(net.params))
    return float(loss.value), grads, tape.activation_pattern()


def check_gradients(net: ResidualNet, x, labels, mask: GateMask, weight_decay: float = 0.0,
                    schedule: Optional[DepthSchedule] = None,
                    dropout: Optional[Sequence[Optional[np.ndarray]]] = None,
                    h: float = 1e-5) -> GradCheckResult:
    """Finite-difference check of the full objective with gates and masks frozen."""
    x = as_matrix(x)
    labels = np.asarray(labels)

    def evaluate(params: Mapping[str, np.ndarray]) -> Evaluation:
        perturbed = ResidualNet(net.spec, dict(params), net.bn_state)
        loss, grads, pattern = loss_and_gradient(perturbed, x, labels, mask, weight_decay, schedule,
                                                 dropout=dropout, update_stats=False)
        return Evaluation(loss, grads, pattern)

    return grad_check(evaluate, net.params, h=h)


class SGD:
    """Stochastic gradient descent with heavy-ball momentum."""

    def __init__(self, params: Dict[str, np.ndarray], lr: float, momentum: float = 0.9):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        for name, g in grads.items():
            v = self.velocity[name]
            v *= self.momentum
            v += g
            self.params[name] -= self.lr * v


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """Step decay by ``lr_gamma`` at each milestone fraction of the epoch budget."""
    passed = sum(1 for m in cfg.lr_milestones if epoch >= m * cfg.epochs)
    return cfg.lr * cfg.lr_gamma ** passed


def training_schedule(num_blocks: int, cfg: TrainConfig) -> Optional[DepthSchedule]:
    """Survival schedule used by ``cfg`` (``None`` outside MCSD)."""
    if Regime(cfg.regime) == Regime.MCSD:
        return linear_decay_schedule(num_blocks, cfg.q_final)
    return None


def batch_slices(n: int, batch_size: int, min_size: int) -> List[slice]:
    """Consecutive batches; a trailing batch smaller than ``min_size`` is dropped."""
    slices = []
    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        if stop - start >= min_size:
            slices.append(slice(start, stop))
    return slices


def classification_error(net: ResidualNet, ds: Dataset) -> float:
    """Error of the full-depth deterministic network."""
    logits = forward(net, ds.features, GateMask.all_on(net.num_blocks), "eval")
    return float(np.mean(np.argmax(logits, axis=1) != ds.labels))


def train(net: ResidualNet, dataset: Dataset, cfg: TrainConfig,
          eval_dataset: Optional[Dataset] = None,
          checkpoint_path: Optional[Union[str, Path]] = None,
          checkpoint_metadata: Optional[Dict[str, Any]] = None,
          progress: bool = False) -> TrainReport:
    """
    Minimize the MCSD objective with mini-batch SGD.

    Every random choice (shuffle order, block gates, dropout masks) is drawn
    from a stream keyed by ``(cfg.seed, epoch, batch)``, so a run is a pure
    function of the network's initial state, the data and ``cfg``.

    Raises:
        UsageError: empty dataset or fewer samples than a normalizable batch
        TrainingDivergedError: the loss became NaN or infinite
    """
    if dataset.n == 0:
        raise UsageError("cannot train on an empty dataset")
    regime = Regime(cfg.regime)
    L = net.num_blocks
    schedule = training_schedule(L, cfg)
    rates = dropout_rates(L, cfg.dropout_rate, cfg.dropout_schedule) if regime == Regime.MCDO else None
    min_batch = 2 if net.spec.use_batchnorm else 1
    normalizer = dataset.n if cfg.decay_normalizer == DecayNormalizer.DATASET else None
    optimizer = SGD(net.params, cfg.lr, cfg.momentum)
    report = TrainReport()
    eval_ds = eval_dataset if eval_dataset is not None else dataset
    report_normalizer = normalizer if normalizer is not None else min(cfg.batch_size, dataset.n)

    slices = batch_slices(dataset.n, cfg.batch_size, min_batch)
    if not slices:
        raise UsageError(f"need at least {min_batch} samples per batch, dataset has {dataset.n}")

    logger.info("Training started", extra={"regime": regime.value, "epochs": cfg.epochs,
                                           "samples": dataset.n, "blocks": L})
    started = time.perf_counter()

    for epoch in range(cfg.epochs):
        optimizer.lr = learning_rate(cfg, epoch)
        order = rng.stream(cfg.seed, rng.SHUFFLE, epoch).permutation(dataset.n)
        for b, sl in enumerate(slices):
            idx = order[sl]
            x, y = dataset.features[idx], dataset.labels[idx]
            if regime == Regime.MCSD:
                mask = sample_gates(schedule, rng.stream(cfg.seed, rng.GATES, epoch, b),
                                    ScalingConvention.NONE)
            else:
                mask = GateMask.all_on(L)
            dropout = None
            if rates is not None:
                dropout = sample_dropout_masks(net.spec, len(idx), rates,
                                               rng.stream(cfg.seed, rng.DROPOUT, epoch, b))

            loss, grads, _ = loss_and_gradient(net, x, y, mask, cfg.weight_decay, schedule,
                                               normalizer, cfg.decay_scaling, dropout)
            if not np.isfinite(loss):
                logger.error("Training diverged", extra={"epoch": epoch, "batch": b, "loss": loss})
                raise TrainingDivergedError(epoch, b, loss)
            optimizer.step(grads)
            train_steps.inc()

        # full-depth objective over the whole training set, a pure function of the parameters
        epoch_loss = mcsd_loss(net, dataset.features, dataset.labels, GateMask.all_on(L),
                               cfg.weight_decay, schedule, report_normalizer, cfg.decay_scaling)
        epoch_error = classification_error(net, eval_ds)
        if not np.isfinite(epoch_loss) or not all(np.all(np.isfinite(p)) for p in net.params.values()):
            raise TrainingDivergedError(epoch, len(slices) - 1, epoch_loss)
        report.train_loss.append(epoch_loss)
        report.eval_error.append(epoch_error)
        if progress:
            progress_logger.info("epoch", extra={"event": "epoch", "epoch": epoch,
                                                 "train_loss": epoch_loss,
                                                 "eval_error": epoch_error,
                                                 "lr": optimizer.lr})

    report.wall_clock = time.perf_counter() - started
    logger.info("Training finished", extra={"final_loss": report.train_loss[-1],
                                            "final_error": report.eval_error[-1],
                                            "wall_clock": report.wall_clock})

    if checkpoint_path is not None:
        metadata = {"train_config": cfg.model_dump(mode="json")}
        metadata.update(checkpoint_metadata or {})
        report.checkpoint = str(save_checkpoint(net, checkpoint_path, metadata))
    return report


def search_drop_rate(train_ds: Dataset, val_ds: Dataset, spec: NetworkSpec, cfg: TrainConfig,
                     candidates: Sequence[float], passes: int = 50) -> Tuple[SearchResult, ResidualNet]:
    """
    Linear search over the final survival probability (MCSD) or dropout rate (MCDO).

    Every candidate trains from the same initialization and seed; candidates
    are ranked by validation NLL of the Monte Carlo predictive mean, ties going
    to the earlier candidate. Returns the table and the best network.
    """
    regime = Regime(cfg.regime)
    parameter = candidate_label(regime)
    if parameter is None:
        raise UsageError("drop-rate search applies to MCSD and MCDO only")
    if not candidates:
        raise UsageError("at least one candidate is required")

    rows: List[SearchRow] = []
    best_net, best_nll = None, np.inf
    for value in candidates:
        cand_cfg = cfg.model_copy(update={parameter: float(value)})
        cand_cfg = TrainConfig.model_validate(cand_cfg.model_dump())
        net = ResidualNet.initialize(spec, cfg.seed)
        train(net, train_ds, cand_cfg)
        mc = McConfig(passes=passes, base_seed=cfg.seed, regime=regime,
                      dropout_rate=cand_cfg.dropout_rate,
                      dropout_schedule=cand_cfg.dropout_schedule)
        summary = mc_predict(net, val_ds.features, training_schedule(spec.num_blocks, cand_cfg), mc)
        preds = PredictionSet(summary.mean_probs, val_ds.labels)
        row = SearchRow(candidate=float(value), val_nll=nll(preds), val_error=test_error(preds))
        rows.append(row)
        logger.info("Search candidate evaluated", extra=row.model_dump())
        if row.val_nll < best_nll:
            best_nll, best_net = row.val_nll, net

    best = min(rows, key=lambda r: r.val_nll)
    return SearchResult(regime=regime, parameter=parameter, best=best.candidate, rows=rows), best_net
