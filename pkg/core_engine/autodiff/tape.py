"""
Reverse-mode automatic differentiation over numpy arrays.

A Tape records every array operation whose inputs depend on a registered
parameter block. Each recorded node stores its parents and a vector-Jacobian
product closure; `Tape.backward` walks the nodes in reverse creation order,
which is a topological order by construction.

The same code path runs with `record=False` for plain evaluation: ops still
compute their values (bit-for-bit the same numpy calls) but nothing is kept,
so evaluating a loss without gradients costs no tape memory.

Discrete, non-differentiable choices made while evaluating (hit triangles,
visibility, lookup cells) are registered with `Tape.decide`; their digest lets
the gradient checker recognise coordinates that cross a discontinuity.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from core_engine.errors import NonFiniteError, TapeError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int]
VJP = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tape:
    """
    Recording tape for one loss evaluation.

    Args:
        record: keep vjp closures so `backward` can run
        seed: Monte-Carlo seed used by the evaluation, reported with gradients
        check_finite: abort as soon as an op produces NaN or Inf
        track_decisions: hash discrete choices (branch masks, lookup cells)
    """

    def __init__(self, record: bool = True, seed: Optional[int] = None, check_finite: bool = True,
                 track_decisions: bool = False):
        self.record = record
        self.seed = seed
        self.check_finite = check_finite
        self.track_decisions = track_decisions
        self._parents: List[Tuple[int, ...]] = []
        self._vjps: List[Optional[VJP]] = []
        self._ops: List[str] = []
        self._shapes: List[Tuple[int, ...]] = []
        self.params: Dict[str, int] = {}
        self.param_shapes: Dict[str, Tuple[int, ...]] = {}
        self._decisions = hashlib.sha256()
        self.ops_evaluated = 0

    def __len__(self) -> int:
        return len(self._vjps)

    @property
    def node_count(self) -> int:
        return len(self._vjps)

    def param(self, name: str, value: ArrayLike) -> "DiffValue":
        """Register a parameter block and return it as a differentiable leaf."""
        if name in self.params:
            raise TapeError(f"parameter block '{name}' registered twice")
        array = np.array(value, dtype=np.float64)
        self.param_shapes[name] = array.shape
        if not self.record:
            self.params[name] = -1
            return DiffValue(self, -1, array)
        node = self._append("param:" + name, (), None, array.shape)
        self.params[name] = node
        return DiffValue(self, node, array)

    def constant(self, value: ArrayLike) -> "DiffValue":
        return DiffValue(self, -1, np.asarray(value, dtype=np.float64))

    def decide(self, name: str, choice: np.ndarray) -> None:
        """Record a discrete choice so perturbed evaluations can be compared."""
        if not self.track_decisions:
            return
        choice = np.ascontiguousarray(choice)
        self._decisions.update(name.encode())
        self._decisions.update(str(choice.shape).encode())
        self._decisions.update(choice.tobytes())

    def decisions_digest(self) -> str:
        return self._decisions.hexdigest()

    def _append(self, op: str, parents: Tuple[int, ...], vjp: Optional[VJP], shape: Tuple[int, ...]) -> int:
        self._parents.append(parents)
        self._vjps.append(vjp)
        self._ops.append(op)
        self._shapes.append(shape)
        return len(self._vjps) - 1

    def backward(self, loss: "DiffValue") -> Dict[int, np.ndarray]:
        """
        Propagate d(loss)/d(node) from `loss` back to the leaves.

        Returns:
            Mapping from leaf node id to its accumulated gradient
        """
        if loss.tape is not self:
            raise TapeError("loss was not produced by this tape")
        if loss.value.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        leaves: Dict[int, np.ndarray] = {}
        if loss.node < 0:
            return leaves

        pending: Dict[int, np.ndarray] = {loss.node: np.ones(self._shapes[loss.node])}
        for node in range(loss.node, -1, -1):
            grad = pending.pop(node, None)
            if grad is None:
                continue
            vjp = self._vjps[node]
            if vjp is None:
                leaves[node] = grad
                continue
            for parent, parent_grad in zip(self._parents[node], vjp(grad)):
                if parent < 0 or parent_grad is None:
                    continue
                parent_grad = _unbroadcast(np.asarray(parent_grad, dtype=np.float64), self._shapes[parent])
                if parent in pending:
                    pending[parent] = pending[parent] + parent_grad
                else:
                    pending[parent] = parent_grad
        return leaves


class DiffValue:
    """An array value living on a tape; node -1 marks a constant."""

    __slots__ = ("tape", "node", "value")
    __array_ufunc__ = None

    def __init__(self, tape: Optional[Tape], node: int, value: np.ndarray):
        self.tape = tape
        self.node = node
        self.value = value

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def requires_grad(self) -> bool:
        return self.node >= 0

    @property
    def T(self) -> "DiffValue":
        return transpose(self)

    def item(self) -> float:
        return float(self.value)

    def __len__(self) -> int:
        return len(self.value)

    def __repr__(self) -> str:
        return f"DiffValue(node={self.node}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


Operand = Union[DiffValue, ArrayLike]


def lift(x: Operand) -> DiffValue:
    if isinstance(x, DiffValue):
        return x
    return DiffValue(None, -1, np.asarray(x, dtype=np.float64))


def value_of(x: Operand) -> np.ndarray:
    return x.value if isinstance(x, DiffValue) else np.asarray(x, dtype=np.float64)


def _tape_of(operands: Sequence[DiffValue]) -> Optional[Tape]:
    tracked = [o.tape for o in operands if o.requires_grad]
    if tracked:
        if any(t is not tracked[0] for t in tracked[1:]):
            raise TapeError("operands belong to different tapes")
        return tracked[0]
    for operand in operands:
        if operand.tape is not None:
            return operand.tape
    return None


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return np.broadcast_to(grad, shape) if grad.shape != shape else grad


def _note(operand: DiffValue, name: str, mask: np.ndarray) -> None:
    if operand.tape is not None and operand.tape.track_decisions:
        operand.tape.decide(name, np.packbits(mask))


def _emit(op: str, value: np.ndarray, operands: Sequence[DiffValue], vjp: VJP) -> DiffValue:
    tape = _tape_of(operands)
    value = np.asarray(value, dtype=np.float64)
    if tape is not None:
        tape.ops_evaluated += 1
        if tape.check_finite and not np.all(np.isfinite(value)):
            raise NonFiniteError(op, len(tape))
    if tape is None or not tape.record or not any(o.requires_grad for o in operands):
        return DiffValue(tape, -1, value)
    node = tape._append(op, tuple(o.node for o in operands), vjp, value.shape)
    return DiffValue(tape, node, value)


# elementwise arithmetic

def add(a: Operand, b: Operand) -> DiffValue:
    a, b = lift(a), lift(b)
    return _emit("add", a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Operand, b: Operand) -> DiffValue:
    a, b = lift(a), lift(b)
    return _emit("sub", a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a: Operand, b: Operand) -> DiffValue:
    a, b = lift(a), lift(b)
    av, bv = a.value, b.value
    return _emit("mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def div(a: Operand, b: Operand) -> DiffValue:
    a, b = lift(a), lift(b)
    av, bv = a.value, b.value
    out = av / bv
    return _emit("div", out, (a, b), lambda g: (g / bv, -g * out / bv))


def neg(a: Operand) -> DiffValue:
    a = lift(a)
    return _emit("neg", -a.value, (a,), lambda g: (-g,))


def power(a: Operand, exponent: float) -> DiffValue:
    a = lift(a)
    av = a.value
    if exponent == 2:
        return square(a)
    return _emit("power", av ** exponent, (a,), lambda g: (g * exponent * av ** (exponent - 1),))


def square(a: Operand) -> DiffValue:
    a = lift(a)
    av = a.value
    return _emit("square", av * av, (a,), lambda g: (2.0 * g * av,))


def sqrt(a: Operand) -> DiffValue:
    a = lift(a)
    out = np.sqrt(a.value)
    return _emit("sqrt", out, (a,), lambda g: (0.5 * g / out,))


def exp(a: Operand) -> DiffValue:
    a = lift(a)
    out = np.exp(a.value)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a: Operand) -> DiffValue:
    a = lift(a)
    av = a.value
    return _emit("log", np.log(av), (a,), lambda g: (g / av,))


def sin(a: Operand) -> DiffValue:
    a = lift(a)
    av = a.value
    return _emit("sin", np.sin(av), (a,), lambda g: (g * np.cos(av),))


def cos(a: Operand) -> DiffValue:
    a = lift(a)
    av = a.value
    return _emit("cos", np.cos(av), (a,), lambda g: (-g * np.sin(av),))


def arccos(a: Operand) -> DiffValue:
    """arccos of a value already inside [-1, 1]."""
    a = lift(a)
    av = a.value
    return _emit("arccos", np.arccos(av), (a,), lambda g: (-g / np.sqrt(np.maximum(1.0 - av * av, 1e-300)),))


def arctan2(y: Operand, x: Operand) -> DiffValue:
    y, x = lift(y), lift(x)
    yv, xv = y.value, x.value

    def vjp(g):
        r2 = np.maximum(xv * xv + yv * yv, 1e-300)
        return g * xv / r2, -g * yv / r2

    return _emit("arctan2", np.arctan2(yv, xv), (y, x), vjp)


def abs_(a: Operand) -> DiffValue:
    a = lift(a)
    av = a.value
    _note(a, "abs", av > 0)
    return _emit("abs", np.abs(av), (a,), lambda g: (g * np.sign(av),))


def relu(a: Operand, floor: float = 0.0) -> DiffValue:
    """max(a, floor), gradient passed where a > floor."""
    a = lift(a)
    av = a.value
    _note(a, "relu", av > floor)
    return _emit("relu", np.maximum(av, floor), (a,), lambda g: (g * (av > floor),))


def clip(a: Operand, lo: float, hi: float) -> DiffValue:
    a = lift(a)
    av = a.value
    inside = (av >= lo) & (av <= hi)
    _note(a, "clip", inside)
    return _emit("clip", np.clip(av, lo, hi), (a,), lambda g: (g * inside,))


def where(condition: np.ndarray, a: Operand, b: Operand) -> DiffValue:
    a, b = lift(a), lift(b)
    cond = np.asarray(condition, dtype=bool)
    return _emit("where", np.where(cond, a.value, b.value), (a, b),
                 lambda g: (np.where(cond, g, 0.0), np.where(cond, 0.0, g)))


def cross(a: Operand, b: Operand) -> DiffValue:
    """Cross product along the last axis."""
    a, b = lift(a), lift(b)
    av, bv = a.value, b.value
    return _emit("cross", np.cross(av, bv), (a, b), lambda g: (np.cross(bv, g), np.cross(g, av)))


def detach(a: Operand) -> DiffValue:
    a = lift(a)
    return DiffValue(a.tape, -1, a.value)


# linear algebra and reductions

def matmul(a: Operand, b: Operand) -> DiffValue:
    a, b = lift(a), lift(b)
    av, bv = a.value, b.value
    if av.ndim == 2 and bv.ndim == 1:
        vjp = lambda g: (np.outer(g, bv), av.T @ g)
    elif av.ndim == 1 and bv.ndim == 2:
        vjp = lambda g: (bv @ g, np.outer(av, g))
    elif av.ndim == 2 and bv.ndim == 2:
        vjp = lambda g: (g @ bv.T, av.T @ g)
    elif av.ndim == 1 and bv.ndim == 1:
        vjp = lambda g: (g * bv, g * av)
    else:
        raise TapeError(f"matmul supports 1-D/2-D operands, got {av.shape} @ {bv.shape}")
    return _emit("matmul", av @ bv, (a, b), vjp)


def sum_(a: Operand, axis=None, keepdims: bool = False) -> DiffValue:
    a = lift(a)
    shape = a.value.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _emit("sum", a.value.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a: Operand, axis=None, keepdims: bool = False) -> DiffValue:
    a = lift(a)
    if axis is None:
        count = a.value.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.value.shape[ax] for ax in axes]))
    return sum_(a, axis=axis, keepdims=keepdims) / float(max(count, 1))


def reshape(a: Operand, shape: Tuple[int, ...]) -> DiffValue:
    a = lift(a)
    original = a.value.shape
    return _emit("reshape", a.value.reshape(shape), (a,), lambda g: (g.reshape(original),))


def transpose(a: Operand, axes: Optional[Tuple[int, ...]] = None) -> DiffValue:
    a = lift(a)
    inverse = None if axes is None else tuple(np.argsort(axes))
    return _emit("transpose", np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inverse),))


def expand_dims(a: Operand, axis: int) -> DiffValue:
    a = lift(a)
    return reshape(a, np.expand_dims(a.value, axis).shape)


def broadcast_to(a: Operand, shape: Tuple[int, ...]) -> DiffValue:
    a = lift(a)
    return _emit("broadcast_to", np.broadcast_to(a.value, shape).copy(), (a,), lambda g: (g,))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(item, (int, np.integer, slice)) or item is None or item is Ellipsis for item in items)


def getitem(a: Operand, index) -> DiffValue:
    a = lift(a)
    shape = a.value.shape
    basic = _is_basic_index(index)

    def vjp(g):
        out = np.zeros(shape)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _emit("getitem", a.value[index], (a,), vjp)


def scatter_rows(indices: np.ndarray, values: np.ndarray, n_rows: int) -> np.ndarray:
    """Sum rows of `values` into `n_rows` buckets given by `indices`, in index order."""
    indices = np.asarray(indices).ravel()
    flat = np.asarray(values, dtype=np.float64).reshape(indices.size, -1)
    out = np.empty((n_rows, flat.shape[1]))
    for column in range(flat.shape[1]):
        out[:, column] = np.bincount(indices, weights=flat[:, column], minlength=n_rows)
    return out


def take(a: Operand, indices: np.ndarray) -> DiffValue:
    """Gather rows (axis 0) of `a` with an integer index array of any shape."""
    a = lift(a)
    indices = np.asarray(indices, dtype=np.int64)
    shape = a.value.shape

    def vjp(g):
        rows = scatter_rows(indices, g, shape[0])
        return (rows.reshape(shape),)

    return _emit("take", a.value[indices], (a,), vjp)


def index_add(indices: np.ndarray, values: Operand, n_rows: int) -> DiffValue:
    """Adjoint of `take`: out[indices[k]] += values[k]."""
    values = lift(values)
    indices = np.asarray(indices, dtype=np.int64)
    trailing = values.value.shape[indices.ndim:]
    out = scatter_rows(indices, values.value, n_rows).reshape((n_rows,) + trailing)
    return _emit("index_add", out, (values,), lambda g: (g[indices],))


def stack(items: Sequence[Operand], axis: int = 0) -> DiffValue:
    items = [lift(item) for item in items]
    out = np.stack([item.value for item in items], axis=axis)

    def vjp(g):
        return tuple(np.take(g, k, axis=axis) for k in range(len(items)))

    return _emit("stack", out, items, vjp)


def concatenate(items: Sequence[Operand], axis: int = 0) -> DiffValue:
    items = [lift(item) for item in items]
    sizes = [item.value.shape[axis] for item in items]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([item.value for item in items], axis=axis)
    return _emit("concatenate", out, items, lambda g: tuple(np.split(g, splits, axis=axis)))


# entry points

@dataclass
class GradientReport:
    """Gradients of one loss with respect to every registered block."""

    grads: Dict[str, np.ndarray]
    node_count: int
    seed: Optional[int] = None
    loss: float = float("nan")
    shapes: Dict[str, Tuple[int, ...]] = field(default_factory=dict)

    def flat(self, names: Optional[Sequence[str]] = None) -> np.ndarray:
        names = list(self.grads) if names is None else list(names)
        if not names:
            return np.zeros(0)
        return np.concatenate([self.grads[name].ravel() for name in names])


def record(f: Callable[[Dict[str, DiffValue], Tape], DiffValue],
           params: Dict[str, np.ndarray],
           seed: Optional[int] = None) -> Tuple[DiffValue, Tape]:
    """
    Evaluate `f` on a recording tape.

    Args:
        f: computation taking the registered parameter blocks and the tape
        params: parameter blocks by name
        seed: Monte-Carlo seed the computation uses

    Returns:
        (scalar loss, tape) ready for `backward`
    """
    tape = Tape(record=True, seed=seed)
    variables = {name: tape.param(name, value) for name, value in params.items()}
    loss = lift(f(variables, tape))
    if loss.tape is None:
        loss = DiffValue(tape, -1, loss.value)
    logger.debug("recorded %d tape nodes (%d ops evaluated)", len(tape), tape.ops_evaluated)
    return loss, tape


def evaluate(f: Callable[[Dict[str, DiffValue], Tape], DiffValue],
             params: Dict[str, np.ndarray],
             seed: Optional[int] = None) -> float:
    """Plain (non-recording) evaluation of the same computation."""
    tape = Tape(record=False, seed=seed)
    variables = {name: tape.param(name, value) for name, value in params.items()}
    return float(value_of(f(variables, tape)))


def backward(loss: DiffValue, tape: Tape) -> GradientReport:
    """Gradients of `loss` with respect to every block registered on `tape`."""
    leaves = tape.backward(loss)
    grads = {}
    for name, node in tape.params.items():
        shape = tape.param_shapes[name]
        grad = leaves.get(node) if node >= 0 else None
        grads[name] = np.zeros(shape) if grad is None else np.array(grad, dtype=np.float64).reshape(shape)
    return GradientReport(grads=grads, node_count=len(tape), seed=tape.seed,
                          loss=float(loss.value), shapes=dict(tape.param_shapes))
