"""
Reverse-mode automatic differentiation over dense numpy arrays

Tensors hold a row-major numpy buffer. Operations are dispatched by kind
through forward_op() and recorded on the Graph that is active on the
current thread; backward() walks that tape in reverse.
"""
import logging
import threading
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Type, Union

import numpy as np

from error_handler import GradCheckError, GraphError, ShapeError, UnknownOpError

logger = logging.getLogger(__name__)

LOG_EPS = 1e-12
DEFAULT_DTYPE = np.float32
_GELU_C = float(np.sqrt(2.0 / np.pi))


class Tensor:
    """Dense array node of the differentiation graph"""

    def __init__(self, values, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if dtype is None:
            if isinstance(values, np.ndarray) and values.dtype in (np.float32, np.float64):
                dtype = values.dtype
            else:
                dtype = DEFAULT_DTYPE
        self.data = np.array(values, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @classmethod
    def _wrap(cls, array: np.ndarray, requires_grad: bool) -> "Tensor":
        tensor = cls.__new__(cls)
        tensor.data = array
        tensor.requires_grad = requires_grad
        tensor.grad = None
        tensor.name = None
        return tensor

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the buffer"""
        return self.data.reshape(-1)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar-shaped tensor, got {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


@dataclass
class OpRecord:
    """One executed operation kept on the tape"""
    kind: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    function: "Function"


_local = threading.local()


def _graph_stack() -> List["Graph"]:
    if not hasattr(_local, 'stack'):
        _local.stack = []
    return _local.stack


def active_graph() -> Optional["Graph"]:
    stack = _graph_stack()
    return stack[-1] if stack else None


class Graph:
    """
    Tape of operation records in execution (topological) order.

    Usage:
        with Graph() as graph:
            loss = ...
        backward(graph, loss)
    """

    def __init__(self):
        self.records: List[OpRecord] = []
        self._outputs = set()

    def __enter__(self) -> "Graph":
        _graph_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _graph_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def record(self, record: OpRecord):
        self.records.append(record)
        self._outputs.add(id(record.output))

    def produced(self, tensor: Tensor) -> bool:
        return id(tensor) in self._outputs

    def __len__(self):
        return len(self.records)


class Function:
    """Base class for a differentiable operation kind"""

    kind = ''
    arity: Optional[int] = 1

    def __init__(self, attrs: Optional[dict] = None):
        self.attrs = attrs or {}

    def _reject(self, message: str, shapes: Sequence[tuple]):
        raise ShapeError(f"{self.kind}: {message}; operand shapes {list(shapes)}",
                         {'kind': self.kind, 'shapes': [list(s) for s in shapes]})

    def check(self, shapes: Sequence[tuple]):
        """Validate operand shapes, raising ShapeError"""

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError


_REGISTRY: Dict[str, Type[Function]] = {}


def register(kind: str):
    def decorator(cls):
        cls.kind = kind
        _REGISTRY[kind] = cls
        return cls
    return decorator


def _normalize_axes(axes, ndim: int) -> Tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    normalized = tuple(sorted(a % ndim if ndim else a for a in axes))
    if len(set(normalized)) != len(normalized) or any(a < 0 or a >= ndim for a in normalized):
        raise ShapeError(f"invalid axes {axes} for rank {ndim}")
    return normalized


def _same_shapes(fn: Function, shapes: Sequence[tuple]):
    if any(s != shapes[0] for s in shapes[1:]):
        fn._reject("shapes must match exactly", shapes)


@register('matmul')
class MatMul(Function):
    arity = 2

    def check(self, shapes):
        a, b = shapes
        if len(a) != 2 or len(b) != 2 or a[1] != b[0]:
            self._reject("expected (n, k) @ (k, m)", shapes)

    def forward(self, a, b):
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        return grad @ self.b.T, self.a.T @ grad


@register('add')
class Add(Function):
    arity = 2

    def check(self, shapes):
        _same_shapes(self, shapes)

    def forward(self, a, b):
        return a + b

    def backward(self, grad):
        return grad, grad


@register('sub')
class Sub(Function):
    arity = 2

    def check(self, shapes):
        _same_shapes(self, shapes)

    def forward(self, a, b):
        return a - b

    def backward(self, grad):
        return grad, -grad


@register('mul')
class Mul(Function):
    arity = 2

    def check(self, shapes):
        _same_shapes(self, shapes)

    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return grad * self.b, grad * self.a


@register('scalar-scale')
class ScalarScale(Function):
    """x * s with s a static attribute or a one-element operand"""
    arity = None

    def check(self, shapes):
        if len(shapes) == 1:
            if 'scale' not in self.attrs:
                self._reject("needs attrs['scale'] or a scalar operand", shapes)
        elif len(shapes) == 2:
            if int(np.prod(shapes[1])) != 1 or len(shapes[1]) > 1:
                self._reject("second operand must have shape () or (1,)", shapes)
        else:
            self._reject("takes one or two operands", shapes)

    def forward(self, x, s=None):
        self.x = x
        self.s_shape = None if s is None else s.shape
        scale = self.attrs['scale'] if s is None else s.reshape(())
        self.scale = np.asarray(scale, dtype=x.dtype)
        return x * self.scale

    def backward(self, grad):
        gx = grad * self.scale
        if self.s_shape is None:
            return (gx,)
        return gx, np.asarray(np.sum(grad * self.x), dtype=self.x.dtype).reshape(self.s_shape)


@register('relu')
class ReLU(Function):
    def forward(self, x):
        self.positive = x > 0
        return np.where(self.positive, x, np.zeros_like(x))

    def backward(self, grad):
        return (grad * self.positive,)


@register('gelu')
class GELU(Function):
    """Tanh approximation"""

    def forward(self, x):
        self.x = x
        self.t = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))
        return 0.5 * x * (1.0 + self.t)

    def backward(self, grad):
        x, t = self.x, self.t
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
        return (grad * (0.5 * (1.0 + t) + 0.5 * x * dt),)


class _Reduce(Function):
    def check(self, shapes):
        self.axes = _normalize_axes(self.attrs.get('axes'), len(shapes[0]))

    def _expand(self, grad):
        expanded = grad.reshape([1 if i in self.axes else n for i, n in enumerate(self.in_shape)])
        return np.broadcast_to(expanded, self.in_shape).copy()


@register('sum-over-axes')
class SumOverAxes(_Reduce):
    def forward(self, x):
        self.in_shape = x.shape
        return np.asarray(np.sum(x, axis=self.axes), dtype=x.dtype)

    def backward(self, grad):
        return (self._expand(grad),)


@register('mean-over-axes')
class MeanOverAxes(_Reduce):
    def forward(self, x):
        self.in_shape = x.shape
        self.count = int(np.prod([x.shape[a] for a in self.axes])) if self.axes else 1
        return np.asarray(np.sum(x, axis=self.axes) / self.count, dtype=x.dtype)

    def backward(self, grad):
        return (self._expand(grad) / self.count,)


@register('reshape')
class Reshape(Function):
    def check(self, shapes):
        target = tuple(self.attrs.get('shape', ()))
        size = int(np.prod(shapes[0]))
        if target.count(-1) > 1:
            self._reject(f"at most one -1 in target {target}", shapes)
        if -1 in target:
            known = int(np.prod([n for n in target if n != -1]))
            if known == 0 or size % known:
                self._reject(f"cannot infer -1 for target {target}", shapes)
            target = tuple(size // known if n == -1 else n for n in target)
        if int(np.prod(target)) != size or any(n <= 0 for n in target):
            self._reject(f"cannot reshape to {target}", shapes)
        self.target = target

    def forward(self, x):
        self.in_shape = x.shape
        return x.reshape(self.target)

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


@register('transpose')
class Transpose(Function):
    def check(self, shapes):
        ndim = len(shapes[0])
        axes = self.attrs.get('axes')
        axes = tuple(reversed(range(ndim))) if axes is None else tuple(a % ndim for a in axes)
        if sorted(axes) != list(range(ndim)):
            self._reject(f"axes {axes} are not a permutation", shapes)
        self.axes = axes

    def forward(self, x):
        return np.ascontiguousarray(x.transpose(self.axes))

    def backward(self, grad):
        return (np.ascontiguousarray(grad.transpose(np.argsort(self.axes))),)


@register('concat')
class Concat(Function):
    arity = None

    def check(self, shapes):
        if not shapes:
            self._reject("needs at least one operand", shapes)
        ndim = len(shapes[0])
        if ndim == 0:
            self._reject("cannot concatenate scalars", shapes)
        axis = self.attrs.get('axis', 0) % ndim
        for s in shapes:
            if len(s) != ndim or any(s[i] != shapes[0][i] for i in range(ndim) if i != axis):
                self._reject(f"extents must match outside axis {axis}", shapes)
        self.axis = axis

    def forward(self, *arrays):
        self.splits = np.cumsum([a.shape[self.axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=self.axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=self.axis))


class _AxisOp(Function):
    def check(self, shapes):
        if len(shapes[0]) == 0:
            self._reject("needs rank >= 1", shapes)
        self.axis = self.attrs.get('axis', -1) % len(shapes[0])


@register('softmax-over-axis')
class Softmax(_AxisOp):
    def forward(self, x):
        shifted = np.exp(x - np.max(x, axis=self.axis, keepdims=True))
        self.out = shifted / np.sum(shifted, axis=self.axis, keepdims=True)
        return self.out

    def backward(self, grad):
        s = self.out
        return (s * (grad - np.sum(grad * s, axis=self.axis, keepdims=True)),)


@register('log-softmax-over-axis')
class LogSoftmax(_AxisOp):
    def forward(self, x):
        shifted = x - np.max(x, axis=self.axis, keepdims=True)
        out = shifted - np.log(np.sum(np.exp(shifted), axis=self.axis, keepdims=True))
        self.softmax = np.exp(out)
        return out

    def backward(self, grad):
        return (grad - self.softmax * np.sum(grad, axis=self.axis, keepdims=True),)


@register('log-clamped')
class LogClamped(Function):
    """log(max(x, eps)); the clamped region has zero gradient"""

    def forward(self, x):
        eps = self.attrs.get('eps', LOG_EPS)
        self.live = x >= eps
        self.clamped = np.maximum(x, eps).astype(x.dtype)
        return np.log(self.clamped)

    def backward(self, grad):
        return (np.where(self.live, grad / self.clamped, 0.0).astype(grad.dtype),)


class _Spatial(Function):
    """Operates on the (H, W) axes of a (..., H, W, C) array"""

    def check(self, shapes):
        shape = shapes[0]
        self.factor = int(self.attrs.get('factor', 2))
        if len(shape) < 3:
            self._reject("expects (..., H, W, C)", shapes)
        if self.factor < 1:
            self._reject(f"factor {self.factor} must be >= 1", shapes)


@register('nearest-upsample-2d')
class NearestUpsample2d(_Spatial):
    def forward(self, x):
        self.in_shape = x.shape
        f = self.factor
        return np.repeat(np.repeat(x, f, axis=-3), f, axis=-2)

    def backward(self, grad):
        *lead, h, w, c = self.in_shape
        f = self.factor
        return (grad.reshape(*lead, h, f, w, f, c).sum(axis=(-4, -2)),)


def _merge_permutation(lead: int) -> List[int]:
    # (lead, H/f, dy, W/f, dx, C) <-> (lead, H/f, W/f, dy, dx, C); an involution
    return list(range(lead)) + [lead, lead + 2, lead + 1, lead + 3, lead + 4]


def merge_patches(x: np.ndarray, factor: int) -> np.ndarray:
    *lead, h, w, c = x.shape
    f = factor
    blocks = x.reshape(*lead, h // f, f, w // f, f, c).transpose(_merge_permutation(len(lead)))
    return np.ascontiguousarray(blocks).reshape(*lead, h // f, w // f, f * f * c)


def unmerge_patches(x: np.ndarray, factor: int) -> np.ndarray:
    """Exact inverse of merge_patches"""
    *lead, h, w, c = x.shape
    f = factor
    channels = c // (f * f)
    blocks = x.reshape(*lead, h, w, f, f, channels).transpose(_merge_permutation(len(lead)))
    return np.ascontiguousarray(blocks).reshape(*lead, h * f, w * f, channels)


@register('patch-merge-2d')
class PatchMerge2d(_Spatial):
    """Folds each f x f block into channels: out[..., y, x, (dy*f + dx)*C + c]"""

    def check(self, shapes):
        super().check(shapes)
        h, w = shapes[0][-3], shapes[0][-2]
        if h % self.factor or w % self.factor:
            self._reject(f"spatial extents not divisible by factor {self.factor}", shapes)

    def forward(self, x):
        return merge_patches(x, self.factor)

    def backward(self, grad):
        return (unmerge_patches(grad, self.factor),)


@register('cosine-similarity-over-axis')
class CosineSimilarity(Function):
    """Cosine of a and b along axis; a zero-norm side gives similarity 0"""
    arity = 2

    def check(self, shapes):
        _same_shapes(self, shapes)
        if len(shapes[0]) == 0:
            self._reject("needs rank >= 1", shapes)
        self.axis = self.attrs.get('axis', -1) % len(shapes[0])

    def forward(self, a, b):
        axis = self.axis
        na = np.sqrt(np.sum(a * a, axis=axis))
        nb = np.sqrt(np.sum(b * b, axis=axis))
        self.valid = (na > 0) & (nb > 0)
        denom = np.where(self.valid, na * nb, 1.0)
        self.sim = np.where(self.valid, np.sum(a * b, axis=axis) / denom, 0.0).astype(a.dtype)
        self.a, self.b = a, b
        self.na = np.where(self.valid, na, 1.0)
        self.nb = np.where(self.valid, nb, 1.0)
        return self.sim

    def backward(self, grad):
        axis = self.axis

        def expand(v):
            return np.expand_dims(v, axis)

        g = expand(np.where(self.valid, grad, 0.0))
        na, nb, sim = expand(self.na), expand(self.nb), expand(self.sim)
        ga = g * (self.b / (na * nb) - sim * self.a / (na * na))
        gb = g * (self.a / (na * nb) - sim * self.b / (nb * nb))
        return ga.astype(self.a.dtype), gb.astype(self.b.dtype)


OP_KINDS: Tuple[str, ...] = tuple(_REGISTRY)


def forward_op(kind: str, operands: Sequence[Tensor], attrs: Optional[dict] = None) -> Tensor:
    """Run one operation; record it when a graph is active and any operand requires grad"""
    cls = _REGISTRY.get(kind)
    if cls is None:
        raise UnknownOpError(f"Unknown operation kind '{kind}'", {'kind': kind})
    function = cls(attrs)
    if function.arity is not None and len(operands) != function.arity:
        raise ShapeError(f"{kind}: expected {function.arity} operands, got {len(operands)}",
                         {'kind': kind})
    shapes = [tuple(t.shape) for t in operands]
    function.check(shapes)
    dtypes = {t.dtype for t in operands}
    if len(dtypes) > 1:
        raise ShapeError(f"{kind}: mixed dtypes {sorted(str(d) for d in dtypes)}; operand shapes {shapes}",
                         {'kind': kind, 'shapes': [list(s) for s in shapes]})

    out = function.forward(*[t.data for t in operands])
    graph = active_graph()
    track = graph is not None and any(t.requires_grad for t in operands)
    result = Tensor._wrap(np.asarray(out, dtype=operands[0].dtype), track)
    if track:
        graph.record(OpRecord(kind, tuple(operands), result, function))
    return result


def backward(graph: Graph, loss: Tensor) -> List[Tensor]:
    """
    Accumulate d(loss)/d(leaf) into .grad of every requires_grad leaf reached.

    Returns:
        The leaves that received a gradient, in first-reached order
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar-shaped loss, got {loss.shape}")
    if not graph.produced(loss):
        raise GraphError("loss was not produced by this graph (was the graph active?)")

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    tensors: Dict[int, Tensor] = {id(loss): loss}
    for record in reversed(graph.records):
        grad = grads.pop(id(record.output), None)
        if grad is None:
            continue
        for tensor, input_grad in zip(record.inputs, record.function.backward(grad)):
            if input_grad is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            tensors[key] = tensor
            grads[key] = grads[key] + input_grad if key in grads else input_grad

    leaves = []
    for key, grad in grads.items():
        leaf = tensors[key]
        grad = np.asarray(grad, dtype=leaf.dtype).reshape(leaf.shape)
        leaf.grad = grad if leaf.grad is None else leaf.grad + grad
        leaves.append(leaf)
    return leaves


def _probe(function: Callable[[Tensor], Tensor], point: np.ndarray, index: int) -> float:
    value = function(Tensor(point, dtype=np.float64))
    if value.data.size != 1:
        raise ShapeError(f"grad_check function must return a scalar, got {value.shape}")
    value = float(value.data.reshape(-1)[0])
    if not np.isfinite(value):
        raise GradCheckError(f"non-finite function value while probing coordinate {index}",
                             {'coordinate': index, 'value': value})
    return value


def grad_check(function: Callable[[Tensor], Tensor], point, step: float = 1e-5) -> float:
    """
    Compare reverse-mode gradients with central differences at 64-bit.

    Returns:
        max over coordinates of |analytic - numeric| / max(1, |numeric|)
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    if not np.all(np.isfinite(base)):
        raise GradCheckError("grad_check point must be finite")

    leaf = Tensor(base.copy(), requires_grad=True, dtype=np.float64)
    with Graph() as graph:
        out = function(leaf)
    if not np.all(np.isfinite(out.data)):
        raise GradCheckError("non-finite function value at the check point", {'coordinate': -1})
    if graph.produced(out):
        backward(graph, out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base)

    flat = base.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        probe = flat.copy()
        probe[i] = flat[i] + step
        f_plus = _probe(function, probe.reshape(base.shape), i)
        probe[i] = flat[i] - step
        f_minus = _probe(function, probe.reshape(base.shape), i)
        numeric = (f_plus - f_minus) / (2.0 * step)
        err = abs(float(analytic.reshape(-1)[i]) - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    logger.debug(f"grad_check over {flat.size} coordinates: max relative error {worst:.3e}")
    return worst


# Convenience wrappers used by the model and the losses

def constant(array, like: Tensor) -> Tensor:
    """No-grad tensor with the dtype of `like`"""
    return Tensor(np.asarray(array), dtype=like.dtype)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return forward_op('matmul', [a, b])


def add(a: Tensor, b: Tensor) -> Tensor:
    return forward_op('add', [a, b])


def sub(a: Tensor, b: Tensor) -> Tensor:
    return forward_op('sub', [a, b])


def mul(a: Tensor, b: Tensor) -> Tensor:
    return forward_op('mul', [a, b])


def scale(x: Tensor, s: Union[float, Tensor]) -> Tensor:
    if isinstance(s, Tensor):
        return forward_op('scalar-scale', [x, s])
    return forward_op('scalar-scale', [x], {'scale': float(s)})


def relu(x: Tensor) -> Tensor:
    return forward_op('relu', [x])


def gelu(x: Tensor) -> Tensor:
    return forward_op('gelu', [x])


def sum_over(x: Tensor, axes=None) -> Tensor:
    return forward_op('sum-over-axes', [x], {'axes': axes})


def mean_over(x: Tensor, axes=None) -> Tensor:
    return forward_op('mean-over-axes', [x], {'axes': axes})


def reshape(x: Tensor, shape) -> Tensor:
    return forward_op('reshape', [x], {'shape': tuple(shape)})


def transpose(x: Tensor, axes=None) -> Tensor:
    return forward_op('transpose', [x], {'axes': axes})


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return forward_op('concat', list(tensors), {'axis': axis})


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return forward_op('softmax-over-axis', [x], {'axis': axis})


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    return forward_op('log-softmax-over-axis', [x], {'axis': axis})


def log_clamped(x: Tensor, eps: float = LOG_EPS) -> Tensor:
    return forward_op('log-clamped', [x], {'eps': eps})


def upsample(x: Tensor, factor: int) -> Tensor:
    return forward_op('nearest-upsample-2d', [x], {'factor': factor})


def patch_merge(x: Tensor, factor: int) -> Tensor:
    return forward_op('patch-merge-2d', [x], {'factor': factor})


def cosine_similarity(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    return forward_op('cosine-similarity-over-axis', [a, b], {'axis': axis})
