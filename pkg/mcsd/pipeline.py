"""
Command bodies: load inputs, call the services, write artifacts.

Every function here takes a validated run configuration and an output
directory, and returns a small summary dict. All artifacts carry the format
version and the resolved configuration.
"""
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Type, TypeVar, Union
import json
import logging
import numpy as np
from pydantic import BaseModel, ValidationError

from .core.config import settings
from .core.exceptions import ConfigError, ShapeError
from .models import (
    DataRunConfig,
    DataSource,
    EvalRunConfig,
    GradCheckRunConfig,
    McConfig,
    NetworkSpec,
    OodRunConfig,
    Regime,
    ScalingConvention,
    TrainConfig,
    TrainRunConfig,
    VerificationConfig,
    VerifyRunConfig,
)
from .models.configs import candidate_label
from .services import data as data_service
from .services import metrics, verify
from .services.data import Dataset, Standardizer
from .services.resnet import GateMask, ResidualNet, load_checkpoint
from .services.stochastic import DepthSchedule, linear_decay_schedule, mc_predict, sample_gates
from .services.train import check_gradients, search_drop_rate, train, training_schedule
from .utils import rng
from .utils.artifacts import read_json, write_json

logger = logging.getLogger(__name__)

RunT = TypeVar("RunT", bound=BaseModel)
PathLike = Union[str, Path]

CHECKPOINT_FILE = "checkpoint.json"
TRAIN_REPORT_FILE = "train_report.json"
EVAL_REPORT_FILE = "eval_report.json"
PREDICTIONS_FILE = "predictions.json"
RELIABILITY_FILE = "reliability.csv"
CDF_IN_FILE = "entropy_cdf_in.csv"
CDF_OOD_FILE = "entropy_cdf_ood.csv"
OOD_SUMMARY_FILE = "ood_summary.json"
SWEEP_FILE = "morph_sweep.csv"
TRIALS_FILE = "verify_trials.jsonl"
VERIFY_SUMMARY_FILE = "verify_summary.json"
GRAD_CHECK_FILE = "grad_check.json"
PAIRS_FILE = "pairs.csv"

# Used when a stochastic regime is requested for a checkpoint trained without it
FALLBACK_Q_FINAL = 0.5
FALLBACK_DROPOUT_RATE = 0.1
# OOD companions default to a shift of this many data standard deviations along the last axis
OOD_SHIFT_SIGMAS = 5.0


# -- configuration -------------------------------------------------------

def format_validation_error(exc: ValidationError) -> str:
    return "; ".join(
        f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}" for err in exc.errors()
    )


def _assign(payload: Dict[str, Any], dotted: str, value: Any) -> None:
    *parents, leaf = dotted.split(".")
    node = payload
    for key in parents:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{dotted}: cannot override inside a non-object value")
    node[leaf] = value


def load_run_config(model: Type[RunT], path: Optional[PathLike] = None,
                    overrides: Optional[Mapping[str, Any]] = None) -> RunT:
    """
    Read a JSON run configuration and apply command-line overrides.

    Overrides are keyed by dotted field path (``train.seed``); ``None``
    values are ignored.

    Raises:
        ConfigError: missing or malformed file, or field validation failure
    """
    payload: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            payload = read_json(path)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e.msg} at line {e.lineno})") from None
        if not isinstance(payload, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
    for dotted, value in (overrides or {}).items():
        if value is not None:
            _assign(payload, dotted, value)
    try:
        return model.model_validate(payload)
    except ValidationError as e:
        raise ConfigError(format_validation_error(e)) from None


def envelope(cfg: BaseModel, **payload: Any) -> Dict[str, Any]:
    """Artifact body with provenance."""
    return {"format_version": settings.FORMAT_VERSION, "config": cfg.model_dump(mode="json"), **payload}


# -- data ----------------------------------------------------------------

def generate(src: DataSource) -> Dataset:
    """The full dataset a source describes, before part selection."""
    if src.kind == "moons":
        return data_service.gen_moons(src.n, src.noise, src.seed)
    if src.kind == "blobs":
        return data_service.gen_blobs(src.n, src.centers, src.sigma, src.seed)
    if src.kind == "mirror":
        return data_service.gen_mirror_pairs(src.n // 2, src.dim, src.radius, src.sigma, src.seed)[0]
    return data_service.load_csv(src.path)


def load_source(src: DataSource, standardizer: Optional[Standardizer] = None) -> Dataset:
    ds = generate(src)
    if src.part != "all":
        train_ds, val_ds, test_ds = data_service.split(ds, src.split)
        ds = {"train": train_ds, "val": val_ds, "test": test_ds}[src.part]
    if src.shift is not None:
        ds = data_service.gen_ood(ds, src.shift, src.scale, src.seed)
    if standardizer is not None:
        ds = standardizer.transform(ds)
    return ds


def _checkpoint_source(metadata: Mapping[str, Any], part: str = "test") -> DataSource:
    if "data" not in metadata:
        raise ConfigError("checkpoint records no data source; pass one in the config")
    src = DataSource.model_validate(metadata["data"])
    return src.model_copy(update={"part": part})


def _default_shift(src: DataSource, dim: int) -> Tuple[float, ...]:
    sigma = src.sigma if src.kind in ("blobs", "mirror") else 1.0
    shift = np.zeros(dim)
    shift[-1] = OOD_SHIFT_SIGMAS * sigma
    return tuple(shift.tolist())


# -- checkpoints and regimes ---------------------------------------------

def load_model(path: PathLike) -> Tuple[ResidualNet, Dict[str, Any], Standardizer]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    net, metadata = load_checkpoint(path)
    if "standardizer" in metadata:
        standardizer = Standardizer.from_dict(metadata["standardizer"])
    else:
        standardizer = Standardizer.identity(net.spec.input_dim)
    return net, metadata, standardizer


def resolve_mc(cfg, net: ResidualNet, metadata: Mapping[str, Any]) -> Tuple[McConfig, Optional[DepthSchedule]]:
    """
    Monte Carlo settings for a run against a checkpoint.

    The regime defaults to the training regime. A stochastic regime the
    checkpoint was not trained with still runs, with a warning, using the
    configured or fallback drop setting.
    """
    trained = TrainConfig.model_validate(metadata.get("train_config", {"regime": "DET"}))
    regime = Regime(cfg.regime) if cfg.regime is not None else Regime(trained.regime)
    if regime != Regime.DET and regime != trained.regime:
        logger.warning("Regime does not match checkpoint",
                       extra={"requested": regime.value, "trained": trained.regime.value})

    schedule = None
    dropout_rate = 0.0
    dropout_schedule = trained.dropout_schedule
    if regime == Regime.MCSD:
        if cfg.q_final is not None:
            schedule = linear_decay_schedule(net.num_blocks, cfg.q_final)
        elif metadata.get("schedule"):
            schedule = DepthSchedule(survival=tuple(metadata["schedule"]))
        elif trained.regime == Regime.MCSD:
            schedule = linear_decay_schedule(net.num_blocks, trained.q_final)
        else:
            schedule = linear_decay_schedule(net.num_blocks, FALLBACK_Q_FINAL)
    elif regime == Regime.MCDO:
        if cfg.dropout_rate is not None:
            dropout_rate = cfg.dropout_rate
        elif trained.regime == Regime.MCDO:
            dropout_rate = trained.dropout_rate
        else:
            dropout_rate = FALLBACK_DROPOUT_RATE
        if dropout_rate == 0.0:
            logger.warning("MCDO with dropout rate 0 is deterministic")

    mc = McConfig(passes=cfg.passes, base_seed=cfg.seed, regime=regime, dropout_rate=dropout_rate,
                  dropout_schedule=dropout_schedule, scaling=cfg.scaling)
    return mc, schedule


def _resolved(mc: McConfig, schedule: Optional[DepthSchedule]) -> Dict[str, Any]:
    return {**mc.model_dump(mode="json"),
            "survival": list(schedule.survival) if schedule is not None else None}


# -- commands ------------------------------------------------------------

def run_train(cfg: TrainRunConfig, out: PathLike, progress: bool = False) -> Dict[str, Any]:
    out = Path(out)
    ds = load_source(cfg.data)
    train_ds, val_ds, test_ds = data_service.split(ds, cfg.split)
    standardizer = Standardizer.fit(train_ds) if cfg.standardize else Standardizer.identity(ds.dim)
    train_ds, val_ds, test_ds = (standardizer.transform(d) for d in (train_ds, val_ds, test_ds))
    spec = NetworkSpec(input_dim=ds.dim, hidden_dim=cfg.network.hidden_dim,
                       num_blocks=cfg.network.num_blocks, num_classes=ds.num_classes,
                       use_batchnorm=cfg.network.use_batchnorm)

    train_cfg = cfg.train
    search = None
    if cfg.search is not None:
        search, _ = search_drop_rate(train_ds, val_ds, spec, train_cfg, cfg.search.candidates,
                                     passes=cfg.search.passes)
        train_cfg = TrainConfig.model_validate({**train_cfg.model_dump(),
                                                candidate_label(train_cfg.regime): search.best})
        logger.info("Search selected setting", extra={"parameter": search.parameter, "best": search.best})

    schedule = training_schedule(spec.num_blocks, train_cfg)
    net = ResidualNet.initialize(spec, train_cfg.seed)
    metadata = {
        "data": cfg.data.model_copy(update={"split": cfg.split}).model_dump(mode="json"),
        "standardizer": standardizer.to_dict(),
        "schedule": list(schedule.survival) if schedule is not None else None,
    }
    report = train(net, train_ds, train_cfg, eval_dataset=val_ds,
                   checkpoint_path=out / CHECKPOINT_FILE, checkpoint_metadata=metadata,
                   progress=progress)
    write_json(out / TRAIN_REPORT_FILE, envelope(
        cfg,
        report=report.model_dump(mode="json"),
        train_config=train_cfg.model_dump(mode="json"),
        search=search.model_dump(mode="json") if search is not None else None,
        splits={"train": train_ds.n, "val": val_ds.n, "test": test_ds.n},
    ))
    return {"checkpoint": str(out / CHECKPOINT_FILE), "report": str(out / TRAIN_REPORT_FILE),
            "final_loss": report.train_loss[-1], "final_eval_error": report.eval_error[-1]}


def run_eval(cfg: EvalRunConfig, out: PathLike) -> Dict[str, Any]:
    out = Path(out)
    net, metadata, standardizer = load_model(cfg.checkpoint)
    ds = load_source(cfg.data if cfg.data is not None else _checkpoint_source(metadata), standardizer)
    mc, schedule = resolve_mc(cfg, net, metadata)
    summary = mc_predict(net, ds.features, schedule, mc)
    preds = metrics.PredictionSet(summary.mean_probs, ds.labels)
    report = metrics.calibration_report(preds, cfg.bins, mc.passes, summary.entropy)

    write_json(out / EVAL_REPORT_FILE, envelope(cfg, resolved=_resolved(mc, schedule),
                                                report=report.model_dump(mode="json")))
    write_json(out / PREDICTIONS_FILE, summary.to_dict())
    metrics.write_reliability_csv(report.bins, out / RELIABILITY_FILE)
    return {"report": str(out / EVAL_REPORT_FILE), "nll": report.nll, "ece": report.ece,
            "test_error": report.test_error}


def run_ood(cfg: OodRunConfig, out: PathLike) -> Dict[str, Any]:
    out = Path(out)
    net, metadata, standardizer = load_model(cfg.checkpoint)
    in_src = cfg.in_dist if cfg.in_dist is not None else _checkpoint_source(metadata)
    in_raw = load_source(in_src)
    if cfg.ood is not None:
        ood_raw = load_source(cfg.ood)
    else:
        ood_raw = data_service.gen_ood(in_raw, _default_shift(in_src, in_raw.dim), 1.0, in_src.seed)
    if in_raw.dim != ood_raw.dim:
        raise ShapeError(f"in-distribution data has {in_raw.dim} features, OOD data has {ood_raw.dim}")
    in_ds, ood_ds = standardizer.transform(in_raw), standardizer.transform(ood_raw)

    mc, schedule = resolve_mc(cfg, net, metadata)
    in_entropy = mc_predict(net, in_ds.features, schedule, mc).entropy
    ood_entropy = mc_predict(net, ood_ds.features, schedule, mc).entropy
    metrics.write_cdf_csv(metrics.entropy_cdf(in_entropy), out / CDF_IN_FILE)
    metrics.write_cdf_csv(metrics.entropy_cdf(ood_entropy), out / CDF_OOD_FILE)

    summary = {
        "in_dist": {"n": in_ds.n, "mean_entropy": metrics.mean_entropy(in_entropy)},
        "ood": {"n": ood_ds.n, "mean_entropy": metrics.mean_entropy(ood_entropy)},
    }
    write_json(out / OOD_SUMMARY_FILE, envelope(cfg, resolved=_resolved(mc, schedule), **summary))
    return {"summary": str(out / OOD_SUMMARY_FILE),
            "mean_entropy_in": summary["in_dist"]["mean_entropy"],
            "mean_entropy_ood": summary["ood"]["mean_entropy"]}


def load_pairs(cfg: VerifyRunConfig, input_dim: int) -> Tuple[np.ndarray, np.ndarray]:
    if cfg.synthetic:
        _, accomplices, impostors = data_service.gen_mirror_pairs(
            cfg.n_pairs, input_dim, cfg.radius, cfg.sigma, cfg.seed)
    else:
        accomplices, impostors = data_service.load_pairs_csv(cfg.pairs_csv)
    if accomplices.shape[1] != input_dim:
        raise ShapeError(f"pairs have {accomplices.shape[1]} features, network expects {input_dim}")
    return accomplices, impostors


def run_verify(cfg: VerifyRunConfig, out: PathLike) -> Dict[str, Any]:
    out = Path(out)
    net, metadata, standardizer = load_model(cfg.checkpoint)
    accomplices, impostors = load_pairs(cfg, net.spec.input_dim)
    accomplices, impostors = standardizer.apply(accomplices), standardizer.apply(impostors)

    mc, schedule = resolve_mc(cfg, net, metadata)
    vcfg = VerificationConfig(passes=mc.passes, far_target=cfg.far_target, regime=mc.regime,
                              base_seed=mc.base_seed, dropout_rate=mc.dropout_rate,
                              dropout_schedule=mc.dropout_schedule, scaling=mc.scaling)
    impostor_sims = verify.impostor_similarities(net, accomplices, impostors, schedule, vcfg)
    if cfg.threshold is not None:
        threshold = cfg.threshold
    else:
        threshold = verify.select_threshold(impostor_sims, cfg.far_target)
    vcfg = vcfg.model_copy(update={"threshold": threshold})
    realized_far = verify.false_accept_rate(impostor_sims, threshold)
    logger.info("Verification threshold", extra={"threshold": threshold, "far": realized_far,
                                                 "impostor_scores": int(impostor_sims.size)})

    sweep, trials = verify.morph_sweep(net, accomplices, impostors, cfg.alphas, schedule, vcfg)
    verify.write_sweep_csv(sweep, out / SWEEP_FILE)
    verify.write_trials_jsonl(trials, out / TRIALS_FILE)
    write_json(out / VERIFY_SUMMARY_FILE, envelope(
        cfg,
        resolved=_resolved(mc, schedule),
        threshold=threshold,
        far_target=cfg.far_target,
        realized_far=realized_far,
        impostor_scores=int(impostor_sims.size),
        sweep=sweep.model_dump(mode="json"),
    ))
    return {"summary": str(out / VERIFY_SUMMARY_FILE), "threshold": threshold,
            "realized_far": realized_far}


def run_gen_data(cfg: DataRunConfig, out: PathLike) -> Dict[str, Any]:
    out = Path(out)
    ds = load_source(cfg.data)
    path = data_service.save_csv(ds, out / f"{ds.name}.csv")
    written = {"data": str(path)}
    if cfg.data.kind == "mirror" and cfg.n_pairs:
        _, accomplices, impostors = data_service.gen_mirror_pairs(
            cfg.n_pairs, cfg.data.dim, cfg.data.radius, cfg.data.sigma, cfg.data.seed + 1)
        written["pairs"] = str(data_service.save_pairs_csv(accomplices, impostors, out / PAIRS_FILE))
    return written


def run_grad_check(cfg: GradCheckRunConfig, out: PathLike) -> Dict[str, Any]:
    out = Path(out)
    spec = NetworkSpec(input_dim=cfg.input_dim, hidden_dim=cfg.hidden_dim, num_blocks=cfg.num_blocks,
                       num_classes=cfg.num_classes, use_batchnorm=cfg.use_batchnorm)
    net = ResidualNet.initialize(spec, cfg.seed)
    gen = rng.stream(cfg.seed, rng.DATA)
    x = gen.standard_normal((cfg.batch, cfg.input_dim))
    labels = gen.integers(0, cfg.num_classes, size=cfg.batch)
    schedule = linear_decay_schedule(cfg.num_blocks, cfg.q_final)
    if cfg.sample_gates:
        mask = sample_gates(schedule, rng.stream(cfg.seed, rng.GATES), ScalingConvention.NONE)
    else:
        mask = GateMask.all_on(cfg.num_blocks)
    result = check_gradients(net, x, labels, mask, cfg.weight_decay, schedule, h=cfg.step)
    body = {
        "max_relative_error": result.max_relative_error,
        "checked": result.checked,
        "skipped_kinks": result.skipped_kinks,
        "worst_parameter": result.worst_parameter,
        "gates": list(mask.gates),
        "passed": result.max_relative_error < cfg.tolerance,
    }
    write_json(out / GRAD_CHECK_FILE, envelope(cfg, **body))
    return body
