"""Dense float64 tensors with a reverse-mode tape

Every op computes its forward value with numpy and, when any input requires
a gradient, appends a ``TapeNode`` holding the closure that maps the output
gradient back onto its inputs. ``Tape.backward`` walks the tape in reverse.
"""
import contextlib
import hashlib
import logging
import threading
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from relso.exceptions import NumericalError, ShapeError, TapeError

logger = logging.getLogger(__name__)

DTYPE = np.float64

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
DEFAULT_LR = 0.00002

BN_MOMENTUM = 0.1
NORM_EPS = 1e-5

_local = threading.local()


def _stack():
    if not hasattr(_local, "stack"):
        _local.stack = [Tape()]
        _local.grad_enabled = True
    return _local.stack


def current_tape():
    return _stack()[-1]


def is_grad_enabled():
    _stack()
    return _local.grad_enabled


@contextlib.contextmanager
def no_grad():
    """Nothing computed inside the block is recorded"""
    _stack()
    previous = _local.grad_enabled
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


class Tensor:
    # makes ``ndarray * Tensor`` dispatch to Tensor.__rmul__
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.grad = None
        self._tape = None
        self._generation = None
        self._node = None

    def __repr__(self):
        label = " name={}".format(self.name) if self.name else ""
        return "Tensor(shape={}{}, requires_grad={})".format(self.shape, label, self.requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def zero_grad(self):
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("Tensor division is only defined by a scalar")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


@dataclass
class TapeNode:
    op: str
    inputs: tuple
    output: Tensor
    backward: object


class Tape:
    """Append-only record of one forward pass"""

    def __init__(self):
        self.nodes = []
        self.generation = 0

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, node):
        node.output._tape = self
        node.output._generation = self.generation
        node.output._node = len(self.nodes)
        self.nodes.append(node)

    def clear(self):
        self.nodes = []
        self.generation += 1

    def backward(self, loss, inputs=None):
        """Propagate d(loss)/d(.) to every leaf that requires a gradient

        Returns a mapping ``{leaf tensor: gradient array}``. When ``inputs`` is
        given only those leaves are returned and have ``.grad`` accumulated.
        The tape is cleared afterwards.
        """
        if loss.data.size != 1:
            raise TapeError("backward needs a scalar loss, got shape {}".format(loss.shape))
        if not self.nodes:
            raise TapeError("tape is empty: run a forward pass before backward")
        if loss._tape is not self or loss._generation != self.generation:
            raise TapeError("loss was not recorded on the current tape")

        grads = {id(loss): np.ones_like(loss.data)}
        leaves = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for tensor, g_in in zip(node.inputs, node.backward(g)):
                if g_in is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                grads[key] = grads[key] + g_in if key in grads else g_in
                if tensor._tape is not self or tensor._generation != self.generation:
                    leaves[key] = tensor

        wanted = leaves.values() if inputs is None else inputs
        result = {}
        for tensor in wanted:
            g = grads.get(id(tensor))
            if g is None:
                g = np.zeros_like(tensor.data)
            result[tensor] = g
            tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g
        self.clear()
        return result


def _as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _check_finite(op, data):
    if not np.all(np.isfinite(data)):
        raise NumericalError("non-finite output from {}".format(op))


def _make(op, data, inputs, backward_fn):
    _check_finite(op, data)
    track = is_grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        current_tape().record(TapeNode(op, tuple(inputs), out, backward_fn))
    return out


def _broadcast(op, *shapes):
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise ShapeError("{}: shapes {} do not conform".format(op, " and ".join(str(s) for s in shapes)))


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _expand(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = sorted(a % len(shape) for a in axes)
        for a in axes:
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


# elementwise


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast("add", a.shape, b.shape)
    return _make(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast("sub", a.shape, b.shape)
    return _make(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def neg(a):
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast("mul", a.shape, b.shape)
    return _make(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def relu(x):
    positive = x.data > 0
    return _make("relu", np.where(positive, x.data, 0.0), (x,), lambda g: (g * positive,))


def tanh(x):
    y = np.tanh(x.data)
    return _make("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def softplus(x):
    return _make("softplus", np.logaddexp(0.0, x.data), (x,), lambda g: (g * expit(x.data),))


def exp(x):
    y = np.exp(x.data)
    return _make("exp", y, (x,), lambda g: (g * y,))


def abs_(x):
    return _make("abs", np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


# linear algebra


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands with at least 2 dimensions, got {} and {}".format(a.shape, b.shape))
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul: inner dimensions differ in {} @ {}".format(a.shape, b.shape))
    _broadcast("matmul", a.shape[:-2], b.shape[:-2])

    def backward_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("matmul", a.data @ b.data, (a, b), backward_fn)


def embedding(weight, indices):
    """Rows of ``weight`` selected by an integer array"""
    indices = np.asarray(indices)
    if not np.issubdtype(indices.dtype, np.integer):
        raise ShapeError("embedding indices must be integers")
    vocab = weight.shape[0]
    if indices.size and (indices.min() < 0 or indices.max() >= vocab):
        raise ShapeError("embedding index out of range [0, {})".format(vocab))

    def backward_fn(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, indices, g)
        return (gw,)

    return _make("embedding", weight.data[indices], (weight,), backward_fn)


def softmax(x, mask=None):
    """Softmax over the last axis; ``mask`` (bool) False entries get zero weight"""
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not np.all(mask.any(axis=-1)):
            raise ShapeError("softmax row is fully masked")
        z = np.where(mask, z, -np.inf)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)
    return _make("softmax", y, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def layer_norm(x, gamma, beta, eps=NORM_EPS):
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def backward_fn(g):
        gg = g * gamma.data
        gx = inv * (gg - gg.mean(axis=-1, keepdims=True) - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return _make("layer_norm", xhat * gamma.data + beta.data, (x, gamma, beta), backward_fn)


def conv1d(x, weight, bias):
    """Stride-1, same-padded convolution along axis 1 of a (B, L, C_in) input

    ``weight`` is (K, C_in, C_out) with odd K.
    """
    if x.ndim != 3:
        raise ShapeError("conv1d expects (batch, length, channels), got {}".format(x.shape))
    width, c_in, _ = weight.shape
    if width % 2 == 0:
        raise ShapeError("conv1d kernel width must be odd, got {}".format(width))
    if x.shape[2] != c_in:
        raise ShapeError("conv1d: input has {} channels, kernel expects {}".format(x.shape[2], c_in))
    pad = width // 2
    length = x.shape[1]
    padded = np.pad(x.data, ((0, 0), (pad, pad), (0, 0)))
    # cols[b, i, c, k] == padded[b, i + k, c]
    cols = sliding_window_view(padded, width, axis=1)
    out = np.einsum("bick,kco->bio", cols, weight.data) + bias.data

    def backward_fn(g):
        gw = np.einsum("bick,bio->kco", cols, g)
        gcols = np.einsum("bio,kco->bick", g, weight.data)
        gpadded = np.zeros_like(padded)
        for k in range(width):
            gpadded[:, k : k + length, :] += gcols[..., k]
        return gpadded[:, pad : pad + length, :], gw, g.sum(axis=(0, 1))

    return _make("conv1d", out, (x, weight, bias), backward_fn)


def batch_norm(
    x,
    gamma,
    beta,
    running_mean,
    running_var,
    training,
    momentum=BN_MOMENTUM,
    eps=NORM_EPS,
    update_stats=True,
):
    """Normalize over every axis but the last (channel) axis

    In training mode batch statistics are used and, when ``update_stats``,
    the running arrays are updated in place. Eval mode uses running stats.
    """
    axes = tuple(range(x.ndim - 1))
    if training:
        count = x.size // x.shape[-1]
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if update_stats:
            unbiased = var * count / (count - 1) if count > 1 else var
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased
    else:
        mu, var = running_mean.copy(), running_var.copy()
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv

    def backward_fn(g):
        gg = g * gamma.data
        if training:
            gx = inv * (gg - gg.mean(axis=axes) - xhat * (gg * xhat).mean(axis=axes))
        else:
            gx = gg * inv
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _make("batch_norm", xhat * gamma.data + beta.data, (x, gamma, beta), backward_fn)


# reductions and shape plumbing


def sum_(x, axis=None, keepdims=False):
    return _make(
        "sum",
        np.asarray(x.data.sum(axis=axis, keepdims=keepdims)),
        (x,),
        lambda g: (np.array(_expand(g, x.shape, axis, keepdims)),),
    )


def mean(x, axis=None, keepdims=False):
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))
    count = x.size // max(out.size, 1)
    return _make("mean", out, (x,), lambda g: (np.array(_expand(g, x.shape, axis, keepdims)) / count,))


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError("concat: {}".format(e))
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make("concat", data, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def getitem(x, key):
    def backward_fn(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, key, g)
        return (gx,)

    return _make("slice", np.array(x.data[key]), (x,), backward_fn)


def reshape(x, shape):
    try:
        data = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError("reshape: {}".format(e))
    return _make("reshape", data, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None):
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def l2_norm(x, axis=-1, keepdims=False):
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))

    def backward_fn(g):
        g = g if keepdims else np.expand_dims(g, axis)
        safe = np.where(norm > 0, norm, 1.0)
        return (np.where(norm > 0, g * x.data / safe, 0.0),)

    out = norm if keepdims else np.squeeze(norm, axis=axis)
    return _make("l2_norm", out, (x,), backward_fn)


# losses


def cross_entropy(logits, targets, mask=None):
    """Mean token cross entropy of ``logits`` (..., V) against integer ``targets`` (...)"""
    vocab = logits.shape[-1]
    targets = np.asarray(targets).reshape(-1)
    flat = logits.data.reshape(-1, vocab)
    if flat.shape[0] != targets.shape[0]:
        raise ShapeError("cross_entropy: {} logits rows for {} targets".format(flat.shape[0], targets.shape[0]))
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise ShapeError("cross_entropy target out of range [0, {})".format(vocab))
    weights = np.ones(targets.shape[0]) if mask is None else np.asarray(mask, dtype=DTYPE).reshape(-1)
    count = weights.sum()
    if count == 0:
        raise ShapeError("cross_entropy mask selects no positions")

    rows = np.arange(targets.shape[0])
    shifted = flat - flat.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    nll = log_z - shifted[rows, targets]

    def backward_fn(g):
        probs = np.exp(shifted - log_z[:, None])
        probs[rows, targets] -= 1.0
        return ((g * probs * (weights / count)[:, None]).reshape(logits.shape),)

    return _make("cross_entropy", np.asarray((nll * weights).sum() / count), (logits,), backward_fn)


def squared_error(pred, target):
    """Mean squared error between two equally shaped tensors"""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError("squared_error: shapes {} and {} differ".format(pred.shape, target.shape))
    diff = pred.data - target.data
    count = max(diff.size, 1)

    def backward_fn(g):
        gp = g * 2.0 * diff / count
        return gp, -gp

    return _make("squared_error", np.asarray((diff * diff).sum() / count), (pred, target), backward_fn)


# parameters and updates


class ParamStore:
    """Named trainable tensors plus Adam moment accumulators"""

    def __init__(self):
        self.params = {}
        self.first_moment = {}
        self.second_moment = {}
        self.step = 0

    def __contains__(self, name):
        return name in self.params

    def __getitem__(self, name):
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def add(self, name, data):
        if name in self.params:
            raise ValueError("parameter {} already registered".format(name))
        tensor = Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name=name)
        self.params[name] = tensor
        return tensor

    def named_grads(self, grad_map):
        """Translate a ``{tensor: grad}`` map from backward into ``{name: grad}``"""
        return {name: grad_map[t] for name, t in self.params.items() if t in grad_map}

    def zero_grad(self):
        for tensor in self.params.values():
            tensor.zero_grad()

    def state_dict(self):
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_state_dict(self, state):
        """Replace every parameter; the names in ``state`` must match the store exactly"""
        unknown = sorted(set(state) - set(self.params))
        missing = sorted(set(self.params) - set(state))
        if unknown or missing:
            raise KeyError(
                "unknown parameters [{}], missing parameters [{}]".format(", ".join(unknown), ", ".join(missing))
            )
        for name, data in state.items():
            if self.params[name].shape != np.shape(data):
                raise ShapeError(
                    "parameter {}: stored shape {} != {}".format(name, np.shape(data), self.params[name].shape)
                )
        for name, data in state.items():
            self.params[name].data = np.ascontiguousarray(data, dtype=DTYPE)

    def fingerprint(self):
        digest = hashlib.sha256()
        for name, tensor in self.params.items():
            digest.update(name.encode("utf-8"))
            digest.update(tensor.data.tobytes())
        return digest.hexdigest()


def adam_step(store, grads, lr=DEFAULT_LR, betas=ADAM_BETAS, eps=ADAM_EPS):
    """One Adam update of the parameters named in ``grads`` (name -> array)"""
    unknown = set(grads) - set(store.params)
    if unknown:
        raise KeyError("gradients for unknown parameters: {}".format(", ".join(sorted(unknown))))
    beta1, beta2 = betas
    store.step += 1
    t = store.step
    for name, grad in grads.items():
        param = store.params[name]
        if np.shape(grad) != param.shape:
            raise ShapeError("gradient for {} has shape {}, parameter {}".format(name, np.shape(grad), param.shape))
        m = store.first_moment.get(name)
        v = store.second_moment.get(name)
        if m is None:
            m = np.zeros_like(param.data)
            v = np.zeros_like(param.data)
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        store.first_moment[name] = m
        store.second_moment[name] = v
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        param.data = param.data - lr * m_hat / (np.sqrt(v_hat) + eps)
    return store


def sgd_step(store, grads, lr=DEFAULT_LR):
    unknown = set(grads) - set(store.params)
    if unknown:
        raise KeyError("gradients for unknown parameters: {}".format(", ".join(sorted(unknown))))
    store.step += 1
    for name, grad in grads.items():
        param = store.params[name]
        if np.shape(grad) != param.shape:
            raise ShapeError("gradient for {} has shape {}, parameter {}".format(name, np.shape(grad), param.shape))
        param.data = param.data - lr * grad
    return store


OPTIMIZERS = {"adam": adam_step, "sgd": sgd_step}


def clip_grad_norm(grads, max_norm):
    """Scale a ``{name: grad}`` map so its global L2 norm is at most ``max_norm``"""
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if not np.isfinite(total):
        raise NumericalError("non-finite gradient norm")
    if max_norm is None or total <= max_norm:
        return grads, total
    scale = max_norm / (total + 1e-12)
    return {name: g * scale for name, g in grads.items()}, total


# finite differences


def numerical_grad(fn, arrays, h=1e-6):
    arrays = [np.array(a, dtype=DTYPE) for a in arrays]
    result = []
    with no_grad():
        for a in arrays:
            grad = np.zeros_like(a)
            for idx in np.ndindex(a.shape):
                original = a[idx]
                a[idx] = original + h
                plus = fn(*[Tensor(x) for x in arrays]).item()
                a[idx] = original - h
                minus = fn(*[Tensor(x) for x in arrays]).item()
                a[idx] = original
                grad[idx] = (plus - minus) / (2.0 * h)
            result.append(grad)
    return result


def gradcheck(fn, arrays, h=1e-6):
    """Largest relative error between analytic and central-difference gradients

    ``fn`` maps Tensors to a scalar Tensor. The error for each input is
    ``|analytic - numeric| / max(|analytic| + |numeric|, 1e-12)`` in L2 norm.
    """
    arrays = [np.array(a, dtype=DTYPE) for a in arrays]
    with Tape() as tape:
        inputs = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        grad_map = tape.backward(fn(*inputs), inputs=inputs)
    numeric = numerical_grad(fn, arrays, h=h)
    worst = 0.0
    for tensor, approx in zip(inputs, numeric):
        exact = grad_map[tensor]
        scale = max(np.linalg.norm(exact) + np.linalg.norm(approx), 1e-12)
        worst = max(worst, float(np.linalg.norm(exact - approx) / scale))
    return worst
