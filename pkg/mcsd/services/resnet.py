"""
Residual multilayer perceptron.

A linear stem, ``L`` residual blocks ``y = x + s * F(x)`` with
``F = Linear -> BatchNorm -> ReLU -> Linear``, and a linear softmax head.
Which blocks run, and how their residual branch is scaled, is decided by an
explicit :class:`GateMask`, so the same forward serves deterministic,
stochastic-depth and Monte Carlo evaluation.
"""
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Literal, NamedTuple, Optional, Sequence, Tuple, Union
import copy
import logging
import numpy as np

from ..core.config import settings
from ..core.exceptions import ShapeError, UsageError
from ..models import NetworkSpec
from ..utils import rng
from ..utils.artifacts import read_json, write_json
from ..utils.instrumentation import forward_flops
from .numerics import BatchStats, Matrix, Node, Tape, as_matrix

logger = logging.getLogger(__name__)

Mode = Literal["train", "eval"]

# Row norms below this are treated as zero when normalizing embeddings
NORM_FLOOR = 1e-12


@dataclass
class BatchNormState:
    """Running statistics of one batch-normalization layer."""

    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def fresh(cls, width: int) -> "BatchNormState":
        return cls(np.zeros(width), np.ones(width))

    def update(self, stats: BatchStats, momentum: float) -> None:
        self.running_mean = momentum * self.running_mean + (1.0 - momentum) * stats.mean
        self.running_var = momentum * self.running_var + (1.0 - momentum) * stats.var


@dataclass(frozen=True)
class GateMask:
    """Per-block on/off gates and residual-branch scales."""

    gates: Tuple[bool, ...]
    scales: Tuple[float, ...]

    def __post_init__(self):
        if len(self.gates) != len(self.scales):
            raise ShapeError("gates and scales must have the same length")
        if any(not s > 0 for s in self.scales):
            raise ValueError("gate scales must be positive")

    @classmethod
    def all_on(cls, num_blocks: int) -> "GateMask":
        return cls((True,) * num_blocks, (1.0,) * num_blocks)

    @classmethod
    def all_off(cls, num_blocks: int) -> "GateMask":
        return cls((False,) * num_blocks, (1.0,) * num_blocks)

    @classmethod
    def from_gates(cls, gates: Sequence[bool]) -> "GateMask":
        return cls(tuple(bool(g) for g in gates), (1.0,) * len(gates))

    def __len__(self) -> int:
        return len(self.gates)

    @property
    def active(self) -> int:
        return sum(self.gates)


class ResidualNet:
    """
    Parameters, architecture and batch-norm state of a residual MLP.

    Parameters live in a flat ``name -> array`` dict; block ``l`` (0-based)
    owns the ``blocks.{l}.*`` entries. The block linear weights are the
    variational means of the MCSD posterior.
    """

    def __init__(self, spec: NetworkSpec, params: Dict[str, np.ndarray],
                 bn_state: Optional[List[BatchNormState]] = None):
        self.spec = spec
        self.params = params
        self.bn_state = bn_state if bn_state is not None else [
            BatchNormState.fresh(spec.hidden_dim) for _ in range(spec.num_blocks)
        ]
        self._validate()

    def _validate(self) -> None:
        expected = set(parameter_shapes(self.spec))
        if set(self.params) != expected:
            missing = sorted(expected - set(self.params))
            extra = sorted(set(self.params) - expected)
            raise ShapeError(f"parameter set mismatch (missing={missing}, unexpected={extra})")
        for name, shape in parameter_shapes(self.spec).items():
            if self.params[name].shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {self.params[name].shape}")
            if not np.all(np.isfinite(self.params[name])):
                raise ValueError(f"{name}: non-finite parameter")
        if len(self.bn_state) != self.spec.num_blocks:
            raise ShapeError("one batch-norm state per block is required")

    @classmethod
    def initialize(cls, spec: NetworkSpec, seed: int = 0) -> "ResidualNet":
        """Glorot-uniform linear weights, zero biases, unit BN scale."""
        gen = rng.stream(seed, rng.INIT)
        params: Dict[str, np.ndarray] = {}
        for name, shape in parameter_shapes(spec).items():
            if name.endswith(".weight"):
                fan_in, fan_out = shape
                a = np.sqrt(6.0 / (fan_in + fan_out))
                params[name] = gen.uniform(-a, a, size=shape)
            elif name.endswith(".gamma"):
                params[name] = np.ones(shape)
            else:
                params[name] = np.zeros(shape)
        return cls(spec, params)

    @property
    def num_blocks(self) -> int:
        return self.spec.num_blocks

    def block_prefix(self, index: int) -> str:
        return f"blocks.{index}"

    def block_weight_names(self, index: int) -> List[str]:
        prefix = self.block_prefix(index)
        return [f"{prefix}.fc1.weight", f"{prefix}.fc2.weight"]

    def clone(self) -> "ResidualNet":
        return ResidualNet(
            self.spec,
            {k: v.copy() for k, v in self.params.items()},
            copy.deepcopy(self.bn_state),
        )

    def without_block(self, index: int) -> "ResidualNet":
        """A copy with block ``index`` physically removed."""
        if self.num_blocks < 2:
            raise UsageError("cannot remove the only residual block")
        if not 0 <= index < self.num_blocks:
            raise IndexError(f"block {index} out of range")
        spec = self.spec.model_copy(update={"num_blocks": self.num_blocks - 1})
        params = {k: v.copy() for k, v in self.params.items() if not k.startswith("blocks.")}
        kept = [b for b in range(self.num_blocks) if b != index]
        for new, old in enumerate(kept):
            for name, value in self.params.items():
                old_prefix = f"blocks.{old}."
                if name.startswith(old_prefix):
                    params[f"blocks.{new}." + name[len(old_prefix):]] = value.copy()
        bn_state = [copy.deepcopy(self.bn_state[b]) for b in kept]
        return ResidualNet(spec, params, bn_state)


def parameter_shapes(spec: NetworkSpec) -> Dict[str, Tuple[int, ...]]:
    """Ordered parameter names and shapes for ``spec``."""
    d, h, c = spec.input_dim, spec.hidden_dim, spec.num_classes
    shapes: Dict[str, Tuple[int, ...]] = {"stem.weight": (d, h), "stem.bias": (h,)}
    for l in range(spec.num_blocks):
        p = f"blocks.{l}"
        shapes[f"{p}.fc1.weight"] = (h, h)
        shapes[f"{p}.fc1.bias"] = (h,)
        if spec.use_batchnorm:
            shapes[f"{p}.bn.gamma"] = (h,)
            shapes[f"{p}.bn.beta"] = (h,)
        shapes[f"{p}.fc2.weight"] = (h, h)
        shapes[f"{p}.fc2.bias"] = (h,)
    shapes["head.weight"] = (h, c)
    shapes["head.bias"] = (c,)
    return shapes


class Trace(NamedTuple):
    """Nodes of a forward pass recorded on a tape."""

    logits: Node
    features: Node


def trace_forward(net: ResidualNet, x: Matrix, mask: GateMask, mode: Mode, tape: Tape,
                  dropout: Optional[Sequence[Optional[np.ndarray]]] = None,
                  update_stats: bool = True) -> Trace:
    """
    Run the network on ``tape``.

    Args:
        net: network
        x: batch of inputs (B x input_dim)
        mask: block gates and scales; a gated-off block is skipped entirely
        mode: ``train`` normalizes by batch statistics, ``eval`` by running ones
        tape: recording or value-only tape
        dropout: optional per-block multiplicative masks (B x hidden) applied
            after batch normalization; ``None`` entries mean no dropout
        update_stats: whether train mode updates the running statistics
    """
    spec = net.spec
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ShapeError(f"expected input of shape (batch, {spec.input_dim}), got {x.shape}")
    if len(mask) != spec.num_blocks:
        raise ShapeError(f"gate mask has {len(mask)} entries for {spec.num_blocks} blocks")
    if dropout is not None and len(dropout) != spec.num_blocks:
        raise ShapeError("one dropout mask (or None) per block is required")

    start_flops = tape.flops
    p = lambda name: tape.param(name, net.params[name])

    h = tape.linear(tape.constant(x), p("stem.weight"), p("stem.bias"))
    for l in range(spec.num_blocks):
        if not mask.gates[l]:
            continue
        prefix = net.block_prefix(l)
        f = tape.linear(h, p(f"{prefix}.fc1.weight"), p(f"{prefix}.fc1.bias"))
        if spec.use_batchnorm:
            gamma, beta = p(f"{prefix}.bn.gamma"), p(f"{prefix}.bn.beta")
            state = net.bn_state[l]
            if mode == "train":
                f, stats = tape.batchnorm(f, gamma, beta, spec.bn_eps)
                if update_stats:
                    state.update(stats, spec.bn_momentum)
            else:
                f = tape.batchnorm_frozen(f, gamma, beta, state.running_mean,
                                          state.running_var, spec.bn_eps)
        if dropout is not None and dropout[l] is not None:
            f = tape.scale(f, dropout[l])
        f = tape.relu(f)
        f = tape.linear(f, p(f"{prefix}.fc2.weight"), p(f"{prefix}.fc2.bias"))
        if mask.scales[l] != 1.0:
            f = tape.scale(f, mask.scales[l])
        h = tape.add(h, f)

    logits = tape.linear(h, p("head.weight"), p("head.bias"))
    forward_flops.inc(tape.flops - start_flops)
    return Trace(logits, h)


def forward(net: ResidualNet, x, mask: GateMask, mode: Mode = "eval",
            dropout: Optional[Sequence[Optional[np.ndarray]]] = None) -> Matrix:
    """Logits (B x C) for inputs ``x`` under gate ``mask``."""
    x = as_matrix(x)
    trace = trace_forward(net, x, mask, mode, Tape(record=False), dropout)
    return trace.logits.value


def features(net: ResidualNet, x, mask: GateMask, mode: Mode = "eval",
             dropout: Optional[Sequence[Optional[np.ndarray]]] = None) -> Matrix:
    """Penultimate activation (input of the head), unnormalized."""
    x = as_matrix(x)
    trace = trace_forward(net, x, mask, mode, Tape(record=False), dropout)
    return trace.features.value


class Embedding(NamedTuple):
    vectors: Matrix
    degenerate: np.ndarray


def normalize_rows(h: Matrix) -> Embedding:
    """L2-normalize rows; rows with norm below the floor are flagged."""
    norms = np.linalg.norm(h, axis=1, keepdims=True)
    degenerate = norms[:, 0] < NORM_FLOOR
    if np.any(degenerate):
        logger.warning("zero-norm embedding rows", extra={"rows": int(degenerate.sum())})
    return Embedding(h / np.maximum(norms, NORM_FLOOR), degenerate)


def embed(net: ResidualNet, x, mask: GateMask,
          dropout: Optional[Sequence[Optional[np.ndarray]]] = None) -> Embedding:
    """Unit-norm penultimate features (the head is removed for verification)."""
    return normalize_rows(features(net, x, mask, "eval", dropout))


def batchnorm_forward(x, gamma, beta, mode: Mode = "train", eps: float = 1e-5,
                      momentum: float = 0.9, state: Optional[BatchNormState] = None) -> Matrix:
    """
    Standalone batch normalization.

    Train mode standardizes each feature by its batch statistics and, when a
    ``state`` is given, folds them into the running averages with
    ``momentum``. Eval mode uses the running statistics (zero mean, unit
    variance if no state is given).
    """
    x = as_matrix(x)
    tape = Tape(record=False)
    g = tape.constant(np.broadcast_to(np.asarray(gamma, dtype=np.float64), (x.shape[1],)))
    b = tape.constant(np.broadcast_to(np.asarray(beta, dtype=np.float64), (x.shape[1],)))
    if mode == "train":
        out, stats = tape.batchnorm(tape.constant(x), g, b, eps)
        if state is not None:
            state.update(stats, momentum)
        return out.value
    state = state or BatchNormState.fresh(x.shape[1])
    return tape.batchnorm_frozen(tape.constant(x), g, b, state.running_mean,
                                 state.running_var, eps).value


# -- checkpoints ---------------------------------------------------------

CHECKPOINT_KIND = "mcsd.residual_net"


def to_checkpoint(net: ResidualNet, metadata: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """JSON-ready checkpoint; floats keep their shortest round-trip repr."""
    return {
        "kind": CHECKPOINT_KIND,
        "format_version": settings.FORMAT_VERSION,
        "spec": net.spec.model_dump(mode="json"),
        "params": {
            name: {"shape": list(value.shape), "data": value.reshape(-1).tolist()}
            for name, value in net.params.items()
        },
        "bn_state": [
            {"running_mean": s.running_mean.tolist(), "running_var": s.running_var.tolist()}
            for s in net.bn_state
        ],
        "metadata": metadata or {},
    }


def from_checkpoint(payload: Dict[str, Any]) -> Tuple[ResidualNet, Dict[str, Any]]:
    if payload.get("kind") != CHECKPOINT_KIND:
        raise ValueError("not a residual-net checkpoint")
    if str(payload.get("format_version")) != settings.FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {payload.get('format_version')!r}")
    spec = NetworkSpec(**payload["spec"])
    params = {
        name: np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in payload["params"].items()
    }
    bn_state = [
        BatchNormState(np.array(s["running_mean"], dtype=np.float64),
                       np.array(s["running_var"], dtype=np.float64))
        for s in payload["bn_state"]
    ]
    return ResidualNet(spec, params, bn_state), dict(payload.get("metadata", {}))


def save_checkpoint(net: ResidualNet, path: Union[str, Path],
                    metadata: Optional[Dict[str, Any]] = None) -> Path:
    return write_json(path, to_checkpoint(net, metadata))


def load_checkpoint(path: Union[str, Path]) -> Tuple[ResidualNet, Dict[str, Any]]:
    return from_checkpoint(read_json(path))
