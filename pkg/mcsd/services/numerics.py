"""
Dense float64 arithmetic and reverse-mode differentiation.

Differentiation covers a closed set of layer operations (linear, ReLU,
batch normalization, constant scaling, addition, softmax cross-entropy and the
squared-norm penalty). Each operation is recorded on a :class:`Tape` together
with its backward rule; :func:`backward` replays the tape in reverse.
"""
from typing import Callable, Dict, Iterator, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union
import logging
import numpy as np
from scipy.special import log_softmax, softmax

from ..core.exceptions import NonFiniteError, ShapeError, UsageError

logger = logging.getLogger(__name__)

Matrix = np.ndarray

# Denominator floor of the relative error in grad_check
GRAD_CHECK_FLOOR = 1e-5


def as_matrix(data, name: str = "input") -> Matrix:
    """
    Validate external input and return it as a 2-D float64 array.

    Scalars become 1x1 and vectors become a single row.

    Raises:
        ShapeError: more than two dimensions
        NonFiniteError: any NaN or infinite entry
    """
    arr = np.array(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim > 2:
        raise ShapeError(f"{name}: expected at most 2 dimensions, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name}: contains NaN or infinite values")
    return arr


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Matrix product with an explicit shape check."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


class Gradient(Mapping[str, np.ndarray]):
    """Parameter-shaped gradient arrays keyed by parameter name."""

    def __init__(self, arrays: Mapping[str, np.ndarray]):
        self._arrays: Dict[str, np.ndarray] = dict(arrays)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def __add__(self, other: "Gradient") -> "Gradient":
        if set(self) != set(other):
            raise ShapeError("cannot add gradients of different parameter sets")
        return Gradient({k: self[k] + other[k] for k in self})


class Node:
    """A value produced on a tape."""

    __slots__ = ("value", "tape", "index")

    def __init__(self, value: np.ndarray, tape: "Tape", index: int):
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape


class _Op(NamedTuple):
    inputs: Tuple[Node, ...]
    output: Node
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class BatchStats(NamedTuple):
    mean: np.ndarray
    var: np.ndarray


Operand = Union[Node, np.ndarray, float]


class Tape:
    """
    Records layer operations for reverse-mode differentiation.

    With ``record=False`` the same methods only compute values, so a single
    forward implementation serves both training and inference.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self.flops = 0
        self._ops: List[_Op] = []
        self._params: Dict[str, Node] = {}
        self._relu_masks: List[np.ndarray] = []
        self._count = 0

    # -- leaves -----------------------------------------------------------

    def _node(self, value: np.ndarray) -> Node:
        node = Node(value, self, self._count)
        self._count += 1
        return node

    def constant(self, value) -> Node:
        return self._node(np.asarray(value, dtype=np.float64))

    def param(self, name: str, value: np.ndarray) -> Node:
        """Register a differentiable parameter leaf."""
        if name in self._params:
            return self._params[name]
        node = self._node(value)
        self._params[name] = node
        return node

    @property
    def params(self) -> Dict[str, Node]:
        return dict(self._params)

    def _emit(self, value: np.ndarray, inputs: Tuple[Node, ...], backward) -> Node:
        out = self._node(value)
        if self.record:
            self._ops.append(_Op(inputs, out, backward))
        return out

    # -- layer operations -------------------------------------------------

    def linear(self, x: Node, w: Node, b: Node) -> Node:
        """``x @ w + b`` for a batch ``x`` (B x in), ``w`` (in x out), ``b`` (out,)."""
        out = matmul(x.value, w.value) + b.value
        self.flops += x.shape[0] * w.shape[0] * w.shape[1]
        xv, wv = x.value, w.value

        def backward(g):
            return g @ wv.T, xv.T @ g, g.sum(axis=0)

        return self._emit(out, (x, w, b), backward)

    def relu(self, x: Node) -> Node:
        # Subgradient at 0 is 0
        mask = x.value > 0
        self._relu_masks.append(mask)
        out = np.where(mask, x.value, 0.0)

        def backward(g):
            return (g * mask,)

        return self._emit(out, (x,), backward)

    def scale(self, x: Node, factor) -> Node:
        """Multiply by a constant scalar or broadcastable array (gates, dropout masks)."""
        factor = np.asarray(factor, dtype=np.float64)
        out = x.value * factor

        def backward(g):
            return (g * factor,)

        return self._emit(out, (x,), backward)

    def add(self, a: Node, b: Node) -> Node:
        if a.shape != b.shape:
            raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")

        def backward(g):
            return g, g

        return self._emit(a.value + b.value, (a, b), backward)

    def batchnorm(self, x: Node, gamma: Node, beta: Node, eps: float) -> Tuple[Node, BatchStats]:
        """Batch-statistics normalization; returns the output and the batch moments."""
        n = x.shape[0]
        if n < 2:
            raise UsageError("batch normalization with batch statistics needs a batch of at least 2")
        mean = x.value.mean(axis=0)
        var = x.value.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + eps)
        x_hat = (x.value - mean) * inv_std
        out = gamma.value * x_hat + beta.value
        gv = gamma.value

        def backward(g):
            d_gamma = np.sum(g * x_hat, axis=0)
            d_beta = np.sum(g, axis=0)
            d_xhat = g * gv
            dx = (inv_std / n) * (
                n * d_xhat - d_xhat.sum(axis=0) - x_hat * np.sum(d_xhat * x_hat, axis=0)
            )
            return dx, d_gamma, d_beta

        return self._emit(out, (x, gamma, beta), backward), BatchStats(mean, var)

    def batchnorm_frozen(self, x: Node, gamma: Node, beta: Node,
                         mean: np.ndarray, var: np.ndarray, eps: float) -> Node:
        """Normalization with fixed (running) statistics."""
        inv_std = 1.0 / np.sqrt(var + eps)
        x_hat = (x.value - mean) * inv_std
        gv = gamma.value

        def backward(g):
            return g * gv * inv_std, np.sum(g * x_hat, axis=0), np.sum(g, axis=0)

        return self._emit(gv * x_hat + beta.value, (x, gamma, beta), backward)

    def softmax_cross_entropy(self, logits: Node, labels: np.ndarray) -> Node:
        """Mean cross-entropy of integer ``labels`` under ``softmax(logits)``."""
        n, c = logits.shape
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (n,):
            raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
        if np.any(labels < 0) or np.any(labels >= c):
            raise ShapeError(f"labels must lie in [0, {c})")
        logp = log_softmax(logits.value, axis=1)
        loss = -np.mean(logp[np.arange(n), labels])

        def backward(g):
            d = softmax(logits.value, axis=1)
            d[np.arange(n), labels] -= 1.0
            return (g * d / n,)

        return self._emit(np.asarray(loss), (logits,), backward)

    def squared_error(self, pred: Node, target: np.ndarray) -> Node:
        """Mean over rows of the summed squared residual."""
        target = np.asarray(target, dtype=np.float64).reshape(pred.shape)
        resid = pred.value - target
        n = pred.shape[0]

        def backward(g):
            return (g * 2.0 * resid / n,)

        return self._emit(np.asarray(np.sum(resid ** 2) / n), (pred,), backward)

    def sum_of_squares(self, w: Node, coef: float) -> Node:
        """``coef * ||w||^2``."""
        wv = w.value

        def backward(g):
            return (g * 2.0 * coef * wv,)

        return self._emit(np.asarray(coef * np.sum(wv ** 2)), (w,), backward)

    def total(self, terms: Sequence[Node]) -> Node:
        """Sum of scalar nodes."""
        if not terms:
            raise UsageError("total of no terms")
        value = np.asarray(sum(float(t.value) for t in terms))

        def backward(g):
            return tuple(g for _ in terms)

        return self._emit(value, tuple(terms), backward)

    # -- introspection ----------------------------------------------------

    def activation_pattern(self) -> bytes:
        """Packed ReLU on/off pattern of everything computed so far."""
        if not self._relu_masks:
            return b""
        return np.packbits(np.concatenate([m.ravel() for m in self._relu_masks])).tobytes()

    def __len__(self) -> int:
        return len(self._ops)


def backward(tape: Tape, loss: Node, params: Optional[Sequence[str]] = None) -> Gradient:
    """
    Reverse-mode gradient of the scalar ``loss`` w.r.t. the tape's parameters.

    Parameters the loss does not depend on (e.g. a dropped block) get exact
    zeros.

    Raises:
        UsageError: the tape did not record the graph that produced ``loss``
    """
    if not tape.record or not len(tape) or loss.tape is not tape:
        raise UsageError("backward requires a recorded forward pass for this loss")
    if loss.value.size != 1:
        raise UsageError(f"loss must be scalar, got shape {loss.shape}")
    if not any(op.output is loss for op in tape._ops):
        raise UsageError("loss was not produced by a recorded operation")

    grads: Dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}
    for op in reversed(tape._ops):
        g = grads.pop(op.output.index, None)
        if g is None:
            continue
        for node, dg in zip(op.inputs, op.backward(g)):
            if dg is None:
                continue
            if node.index in grads:
                grads[node.index] = grads[node.index] + dg
            else:
                grads[node.index] = dg

    names = params if params is not None else list(tape.params)
    leaves = tape.params
    result = {}
    for name in names:
        node = leaves[name]
        result[name] = np.asarray(grads.get(node.index, np.zeros_like(node.value)), dtype=np.float64)
    return Gradient(result)


class Evaluation(NamedTuple):
    """Loss value, analytic gradient and ReLU pattern at one parameter point."""

    loss: float
    gradient: Optional[Gradient]
    pattern: bytes


class GradCheckResult(NamedTuple):
    max_relative_error: float
    checked: int
    skipped_kinks: int
    worst_parameter: Optional[str]


def grad_check(evaluate: Callable[[Mapping[str, np.ndarray]], Evaluation],
               params: Mapping[str, np.ndarray],
               h: float = 1e-5,
               floor: float = GRAD_CHECK_FLOOR) -> GradCheckResult:
    """
    Compare analytic gradients with central differences.

    ``evaluate(params)`` must be deterministic (all gates and dropout masks
    fixed). The relative error of a coordinate is
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``. Coordinates
    whose perturbation flips a ReLU are skipped since the loss is not
    differentiable across the kink.
    """
    if h <= 0:
        raise ValueError("finite-difference step must be positive")

    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    reference = evaluate(base)
    if reference.gradient is None:
        raise UsageError("evaluate must return an analytic gradient at the base point")

    worst, worst_name, checked, skipped = 0.0, None, 0, 0
    for name, value in base.items():
        analytic = reference.gradient[name]
        flat = value.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            plus = evaluate(base)
            flat[i] = original - h
            minus = evaluate(base)
            flat[i] = original
            if plus.pattern != reference.pattern or minus.pattern != reference.pattern:
                skipped += 1
                continue
            numeric = (plus.loss - minus.loss) / (2.0 * h)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            checked += 1
            if err > worst:
                worst, worst_name = err, name

    if skipped:
        logger.debug("grad_check skipped coordinates at ReLU kinks", extra={"skipped": skipped})
    return GradCheckResult(worst, checked, skipped, worst_name)
