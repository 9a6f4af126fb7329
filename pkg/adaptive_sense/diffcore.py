"""Reverse-mode differentiation over numpy arrays.

Every primitive in this module takes Arrays (or plain numbers) and returns a
new Array. When at least one input lives on a Tape, the output is appended to
that tape together with its vector-Jacobian product. A node can only be built
from nodes that already exist, so walking the tape backwards visits nodes in
reverse topological order.

Arrays built without a tape are plain values; running a model with
``tape=None`` is the no-gradient mode used during evaluation.
"""

import numpy as np
from scipy import special

from .errors import DetachedError, DomainError, NonFiniteError, ShapeError


class Parameter:
    """A named, trainable array with its gradient accumulator."""

    def __init__(self, name, value):
        self.name = name
        self.value = np.array(value)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class Array:
    __slots__ = ("value", "tape", "parents", "vjp", "op", "param")

    def __init__(self, value, tape=None, parents=(), vjp=None, op="constant", param=None):
        value = np.asarray(value).view()
        value.flags.writeable = False
        self.value = value
        self.tape = tape
        self.parents = parents
        self.vjp = vjp
        self.op = op
        self.param = param

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    @property
    def dtype(self):
        return self.value.dtype

    def item(self):
        return float(self.value.reshape(()))

    def __repr__(self):
        where = "detached" if self.tape is None else "taped"
        return f"Array(op={self.op}, shape={self.shape}, {where})"

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

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


class Tape:
    """Ordered record of primitive applications plus the parameters they read."""

    def __init__(self):
        self.nodes = []
        self.params = {}
        self._leaves = {}

    def __len__(self):
        return len(self.nodes)

    def watch(self, param):
        """Return the leaf node standing for ``param`` on this tape."""
        leaf = self._leaves.get(param.name)
        if leaf is not None:
            return leaf
        if param.name in self.params:
            raise ShapeError(f"Two parameters are registered as {param.name}")
        self.params[param.name] = param
        leaf = self._append(Array(param.value, self, op="parameter", param=param))
        self._leaves[param.name] = leaf
        return leaf

    def clear_gradients(self):
        for param in self.params.values():
            param.zero_grad()

    def backward(self, loss):
        return backward(self, loss)

    def _append(self, node):
        self.nodes.append(node)
        return node


class Module:
    """Named collection of parameters and child modules."""

    def __init__(self, name):
        self.name = name
        self._parameters = {}
        self._children = []

    def add_parameter(self, key, value):
        param = Parameter(f"{self.name}.{key}", value)
        self._parameters[key] = param
        return param

    def add_module(self, module):
        self._children.append(module)
        return module

    def parameters(self):
        params = list(self._parameters.values())
        for child in self._children:
            params.extend(child.parameters())
        return params

    def bind(self, tape):
        """Map parameter keys to Arrays, on ``tape`` or as constants."""
        if tape is None:
            return {key: constant(p.value) for key, p in self._parameters.items()}
        return {key: tape.watch(p) for key, p in self._parameters.items()}

    def zero_grad(self):
        for param in self.parameters():
            param.zero_grad()

    def state_dict(self):
        return {p.name: p.value.copy() for p in self.parameters()}

    def load_state_dict(self, state):
        for param in self.parameters():
            try:
                value = state[param.name]
            except KeyError:
                raise ShapeError(f"State is missing parameter {param.name}")
            if value.shape != param.value.shape:
                raise ShapeError(
                    f"{param.name}: expected shape {param.value.shape}, got {value.shape}"
                )
            param.value = np.array(value, dtype=param.value.dtype)
            param.zero_grad()


def _check_finite(value, op):
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{op} produced a non-finite value")


def _record(op, value, parents, vjp):
    value = np.asarray(value)
    _check_finite(value, op)
    tape = None
    for parent in parents:
        if parent.tape is None:
            continue
        if tape is not None and parent.tape is not tape:
            raise DetachedError(f"{op} mixes arrays recorded on different tapes")
        tape = parent.tape
    if tape is None:
        return Array(value, op=op)
    return tape._append(Array(value, tape, tuple(parents), vjp, op))


def _unbroadcast(grad, shape):
    """Sum out the dimensions numpy broadcasting added or stretched."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _lift(x, like=None):
    if isinstance(x, Array):
        return x
    if like is not None and np.ndim(x) == 0:
        return constant(np.asarray(x, dtype=like.dtype))
    return constant(x)


def _operands(a, b):
    if isinstance(a, Array):
        return a, _lift(b, like=a)
    b = _lift(b)
    return _lift(a, like=b), b


def constant(value, dtype=None):
    """Wrap a value as an Array that no gradient flows into."""
    if isinstance(value, Array):
        value = value.value
    value = np.asarray(value, dtype=dtype)
    _check_finite(value, "constant")
    return Array(value)


def detach(x):
    """Stop-gradient: same value, cut off from every tape."""
    return Array(_lift(x).value, op="detach")


# Elementwise arithmetic


def add(a, b):
    a, b = _operands(a, b)
    return _record("add", a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = _operands(a, b)
    return _record("sub", a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = _operands(a, b)
    return _record(
        "mul", a.value * b.value, (a, b), lambda g: (g * b.value, g * a.value)
    )


def div(a, b):
    a, b = _operands(a, b)
    return _record(
        "div",
        a.value / b.value,
        (a, b),
        lambda g: (g / b.value, -g * a.value / (b.value * b.value)),
    )


def neg(x):
    x = _lift(x)
    return _record("neg", -x.value, (x,), lambda g: (-g,))


def square(x):
    x = _lift(x)
    return _record("square", x.value * x.value, (x,), lambda g: (2.0 * g * x.value,))


def exp(x):
    x = _lift(x)
    value = np.exp(x.value)
    return _record("exp", value, (x,), lambda g: (g * value,))


def log(x):
    x = _lift(x)
    if np.any(x.value <= 0):
        raise DomainError("log of a non-positive value")
    return _record("log", np.log(x.value), (x,), lambda g: (g / x.value,))


def cos(x):
    x = _lift(x)
    return _record("cos", np.cos(x.value), (x,), lambda g: (-g * np.sin(x.value),))


def atan2(y, x):
    y, x = _operands(y, x)
    r2 = y.value * y.value + x.value * x.value
    if np.any(r2 == 0):
        raise DomainError("atan2 is not differentiable at the origin")
    return _record(
        "atan2",
        np.arctan2(y.value, x.value),
        (y, x),
        lambda g: (g * x.value / r2, -g * y.value / r2),
    )


def log_i0(x):
    """log I0(x), the log of the modified Bessel function of order zero."""
    x = _lift(x)
    i0e = special.i0e(x.value)
    value = np.log(i0e) + np.abs(x.value)
    return _record(
        "log_i0", value, (x,), lambda g: (g * special.i1e(x.value) / i0e,)
    )


def minimum(a, b):
    a, b = _operands(a, b)
    mask = a.value <= b.value
    return _record(
        "minimum",
        np.where(mask, a.value, b.value),
        (a, b),
        lambda g: (g * mask, g * ~mask),
    )


def clip(x, low, high):
    x = _lift(x)
    mask = (x.value >= low) & (x.value <= high)
    return _record("clip", np.clip(x.value, low, high), (x,), lambda g: (g * mask,))


# Activations


def relu(x):
    x = _lift(x)
    mask = x.value > 0
    return _record("relu", np.where(mask, x.value, 0.0).astype(x.dtype), (x,),
                   lambda g: (g * mask,))


def tanh(x):
    x = _lift(x)
    value = np.tanh(x.value)
    return _record("tanh", value, (x,), lambda g: (g * (1.0 - value * value),))


def sigmoid(x):
    x = _lift(x)
    value = special.expit(x.value)
    return _record("sigmoid", value, (x,), lambda g: (g * value * (1.0 - value),))


def softplus(x):
    x = _lift(x)
    value = np.where(x.value > 30, x.value, np.log1p(np.exp(np.minimum(x.value, 30))))
    return _record("softplus", value, (x,), lambda g: (g * special.expit(x.value),))


# Shape manipulation and reductions


def reshape(x, shape):
    x = _lift(x)
    try:
        value = x.value.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc))
    return _record("reshape", value, (x,), lambda g: (g.reshape(x.shape),))


def getitem(x, index):
    x = _lift(x)

    def vjp(g):
        full = np.zeros_like(x.value, dtype=g.dtype)
        np.add.at(full, index, g)
        return (full,)

    return _record("getitem", x.value[index], (x,), vjp)


def concat(arrays, axis=-1):
    arrays = [_lift(a) for a in arrays]
    axis = axis % arrays[0].ndim
    for a in arrays[1:]:
        if a.ndim != arrays[0].ndim or any(
            n != m for i, (n, m) in enumerate(zip(a.shape, arrays[0].shape)) if i != axis
        ):
            raise ShapeError(
                f"Can not concatenate shapes {arrays[0].shape} and {a.shape} on axis {axis}"
            )
    offsets = np.cumsum([a.shape[axis] for a in arrays])[:-1]
    return _record(
        "concat",
        np.concatenate([a.value for a in arrays], axis=axis),
        tuple(arrays),
        lambda g: tuple(np.split(g, offsets, axis=axis)),
    )


def sum_(x, axis=None):
    x = _lift(x)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _record("sum", np.sum(x.value, axis=axis), (x,), vjp)


def mean(x, axis=None):
    x = _lift(x)
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return sum_(x, axis) / float(count)


# Layers


def dense(input, weight, bias):
    """``input @ weight.T + bias`` over the last axis of ``input``."""
    input, weight, bias = _lift(input), _lift(weight), _lift(bias)
    if weight.ndim != 2 or input.shape[-1] != weight.shape[1]:
        raise ShapeError(
            f"dense: input {input.shape} does not conform to weight {weight.shape}"
        )
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"dense: bias {bias.shape} does not match weight {weight.shape}")

    def vjp(g):
        g2 = g.reshape(-1, weight.shape[0])
        x2 = input.value.reshape(-1, weight.shape[1])
        return g @ weight.value, g2.T @ x2, g2.sum(axis=0)

    return _record(
        "dense", input.value @ weight.value.T + bias.value, (input, weight, bias), vjp
    )


def gru_cell(x, h, w_ih, w_hh, b_ih, b_hh):
    """One GRU step with gates ordered (reset, update, candidate).

    r = sigmoid(W_ir x + b_ir + W_hr h + b_hr)
    u = sigmoid(W_iu x + b_iu + W_hu h + b_hu)
    n = tanh(W_in x + b_in + r * (W_hn h + b_hn))
    h' = (1 - u) * n + u * h
    """
    x, h = _lift(x), _lift(h)
    hidden = h.shape[-1]
    if w_hh.shape != (3 * hidden, hidden) or w_ih.shape[0] != 3 * hidden:
        raise ShapeError(
            f"gru_cell: weights {w_ih.shape}/{w_hh.shape} do not fit hidden size {hidden}"
        )
    gi = dense(x, w_ih, b_ih)
    gh = dense(h, w_hh, b_hh)
    reset = sigmoid(gi[..., :hidden] + gh[..., :hidden])
    update = sigmoid(gi[..., hidden:2 * hidden] + gh[..., hidden:2 * hidden])
    candidate = tanh(gi[..., 2 * hidden:] + reset * gh[..., 2 * hidden:])
    return (1.0 - update) * candidate + update * h


def conv_transpose2d(input, kernel, stride=1, padding=0, bias=None):
    """Transposed 2-D convolution.

    ``input`` is (B, C_in, H, W), ``kernel`` is (C_in, C_out, k_h, k_w). Each
    input pixel scatters a kernel-weighted patch into the output, which has
    spatial size ``(in - 1) * stride - 2 * padding + k``.
    """
    input, kernel = _lift(input), _lift(kernel)
    if stride <= 0:
        raise ShapeError(f"conv_transpose2d: stride must be positive, got {stride}")
    if input.ndim != 4 or kernel.ndim != 4 or input.shape[1] != kernel.shape[0]:
        raise ShapeError(
            f"conv_transpose2d: input {input.shape} does not conform to kernel {kernel.shape}"
        )
    batch, c_in, h, w = input.shape
    _, c_out, kh, kw = kernel.shape
    full_h = (h - 1) * stride + kh
    full_w = (w - 1) * stride + kw
    if padding < 0 or 2 * padding >= min(full_h, full_w):
        raise ShapeError(
            f"conv_transpose2d: padding {padding} leaves no output for kernel {kh}x{kw}"
        )
    span_h = (h - 1) * stride + 1
    span_w = (w - 1) * stride + 1
    flat_kernel = kernel.value.reshape(c_in, c_out * kh * kw)

    cols = input.value.transpose(0, 2, 3, 1).reshape(-1, c_in) @ flat_kernel
    cols = cols.reshape(batch, h, w, c_out, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    full = np.zeros((batch, c_out, full_h, full_w), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            full[:, :, i:i + span_h:stride, j:j + span_w:stride] += cols[:, :, i, j]
    out = full[:, :, padding:full_h - padding, padding:full_w - padding]

    def vjp(g):
        gfull = np.zeros((batch, c_out, full_h, full_w), dtype=g.dtype)
        gfull[:, :, padding:full_h - padding, padding:full_w - padding] = g
        gcols = np.empty((batch, c_out, kh, kw, h, w), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gcols[:, :, i, j] = gfull[:, :, i:i + span_h:stride, j:j + span_w:stride]
        gcols = gcols.transpose(0, 4, 5, 1, 2, 3).reshape(-1, c_out * kh * kw)
        x2 = input.value.transpose(0, 2, 3, 1).reshape(-1, c_in)
        gx = (gcols @ flat_kernel.T).reshape(batch, h, w, c_in).transpose(0, 3, 1, 2)
        gk = (x2.T @ gcols).reshape(kernel.shape)
        return gx, gk

    result = _record("conv_transpose2d", np.ascontiguousarray(out), (input, kernel), vjp)
    if bias is not None:
        result = result + reshape(bias, (1, c_out, 1, 1))
    return result


# Gradients


def backward(tape, loss):
    """Accumulate d(loss)/d(param) into every parameter watched by ``tape``.

    Returns a name -> gradient map of the accumulators. Calling it again
    without clearing adds to what is already there.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape is not tape:
        raise DetachedError("The loss was not recorded on this tape")
    grads = {id(loss): np.ones_like(loss.value)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.param is not None:
            node.param.grad += g
            continue
        if node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or parent.tape is not tape:
                continue
            pg = _unbroadcast(np.asarray(pg), parent.shape)
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return {name: p.grad.copy() for name, p in tape.params.items()}


def _relative_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))


def _scalar(result):
    return float(np.asarray(result.value if isinstance(result, Array) else result).reshape(()))


def finite_diff_check(fn, point, step=1e-4):
    """Compare tape gradients of ``fn`` at ``point`` with central differences.

    Returns the largest per-coordinate relative error
    ``|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)``.
    """
    if step <= 0:
        raise DomainError(f"Finite-difference step must be positive, got {step}")
    point = np.array(point, dtype=np.float64)
    param = Parameter("point", point)
    tape = Tape()
    loss = fn(tape.watch(param))
    if isinstance(loss, Array) and loss.tape is tape:
        backward(tape, loss)
    numeric = np.zeros_like(point)
    for index in np.ndindex(point.shape):
        plus, minus = point.copy(), point.copy()
        plus[index] += step
        minus[index] -= step
        numeric[index] = (_scalar(fn(constant(plus))) - _scalar(fn(constant(minus)))) / (
            2 * step
        )
    return _relative_error(param.grad, numeric)


def parameter_gradient_check(loss_fn, parameters, step=1e-4):
    """finite_diff_check over module parameters.

    ``loss_fn(tape)`` must build a scalar loss, reading parameters through
    ``Module.bind(tape)``; it is called with ``None`` for the perturbed
    evaluations.
    """
    for param in parameters:
        param.zero_grad()
    tape = Tape()
    loss = loss_fn(tape)
    if loss.tape is tape:
        backward(tape, loss)
    worst = 0.0
    for param in parameters:
        analytic = param.grad.copy()
        numeric = np.zeros_like(param.value, dtype=np.float64)
        original = param.value
        for index in np.ndindex(original.shape):
            plus, minus = original.copy(), original.copy()
            plus[index] += step
            minus[index] -= step
            param.value = plus
            high = _scalar(loss_fn(None))
            param.value = minus
            low = _scalar(loss_fn(None))
            numeric[index] = (high - low) / (2 * step)
        param.value = original
        worst = max(worst, _relative_error(analytic, numeric))
    return worst
