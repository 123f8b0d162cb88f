"""Reverse-mode automatic differentiation over the small primitive set the
unfolded network needs: elementwise arithmetic, reductions, dense/conv/pool
layers, batch norm, softplus(-sign), PReLU. Values are float64 numpy arrays;
graphs are built eagerly and freed after backward().
"""

import math
from dataclasses import dataclass

import numpy as np


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad=False, parents=(), backward=None):
        self.value = np.asarray(value, dtype=float)
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.grad = None
        self._parents = parents if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.value.size != 1:
            raise ValueError("backward() requires a scalar output")
        order = []
        seen = set()

        def visit(node):
            if id(node) in seen or not node.requires_grad:
                return
            seen.add(id(node))
            for p in node._parents:
                visit(p)
            order.append(node)

        visit(self)
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node._backward is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g, float)
                else:
                    parent.grad = parent.grad + g

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -np.asarray(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / np.asarray(other))

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_val = a.value + b.value

    def backward(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)

    return Tensor(out_val, parents=(a, b), backward=backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_val = a.value * b.value

    def backward(g):
        return (
            _unbroadcast(g * b.value, a.value.shape),
            _unbroadcast(g * a.value, b.value.shape),
        )

    return Tensor(out_val, parents=(a, b), backward=backward)


def reciprocal(a):
    a = as_tensor(a)
    inv = 1.0 / a.value

    def backward(g):
        return (-g * inv * inv,)

    return Tensor(inv, parents=(a,), backward=backward)


def square(a):
    a = as_tensor(a)

    def backward(g):
        return (2.0 * g * a.value,)

    return Tensor(a.value * a.value, parents=(a,), backward=backward)


def sqrt(a):
    a = as_tensor(a)
    root = np.sqrt(a.value)

    def backward(g):
        return (g * 0.5 / root,)

    return Tensor(root, parents=(a,), backward=backward)


def tanh(a):
    a = as_tensor(a)
    t = np.tanh(a.value)

    def backward(g):
        return (g * (1.0 - t * t),)

    return Tensor(t, parents=(a,), backward=backward)


def sigmoid(a):
    a = as_tensor(a)
    s = _sigmoid(a.value)

    def backward(g):
        return (g * s * (1.0 - s),)

    return Tensor(s, parents=(a,), backward=backward)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_val = a.value @ b.value

    def backward(g):
        ga = g @ np.swapaxes(b.value, -1, -2)
        gb = np.swapaxes(a.value, -1, -2) @ g
        return _unbroadcast(ga, a.value.shape), _unbroadcast(gb, b.value.shape)

    return Tensor(out_val, parents=(a, b), backward=backward)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out_val = a.value.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.value.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.value.shape).copy(),)

    return Tensor(out_val, parents=(a,), backward=backward)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.value.size
    else:
        n = a.value.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)

    def backward(g):
        return (g.reshape(a.value.shape),)

    return Tensor(a.value.reshape(shape), parents=(a,), backward=backward)


def take_scalar(a, i):
    """Single element a[i] as a scalar tensor."""
    a = as_tensor(a)

    def backward(g):
        out = np.zeros_like(a.value)
        out[i] = g
        return (out,)

    return Tensor(a.value[i], parents=(a,), backward=backward)


def stack_last(tensors):
    """Stack a list of equally-shaped tensors along a new last axis."""
    vals = np.stack([t.value for t in tensors], axis=-1)

    def backward(g):
        return tuple(g[..., i] for i in range(len(tensors)))

    return Tensor(vals, parents=tuple(tensors), backward=backward)


def relu(a):
    a = as_tensor(a)
    mask = a.value > 0

    def backward(g):
        return (g * mask,)

    return Tensor(np.where(mask, a.value, 0.0), parents=(a,), backward=backward)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus(a):
    """ln(1 + exp(x)), overflow-safe."""
    a = as_tensor(a)
    out_val = np.logaddexp(0.0, a.value)

    def backward(g):
        return (g * _sigmoid(a.value),)

    return Tensor(out_val, parents=(a,), backward=backward)


def softplus_sign(a):
    """sign(x) * softplus(|x|): odd, smooth, derivative sigmoid(|x|)."""
    a = as_tensor(a)
    out_val = np.sign(a.value) * np.logaddexp(0.0, np.abs(a.value))

    def backward(g):
        return (g * _sigmoid(np.abs(a.value)),)

    return Tensor(out_val, parents=(a,), backward=backward)


def prelu(a, slope):
    """PReLU with a single learnable negative-side slope."""
    a, slope = as_tensor(a), as_tensor(slope)
    neg = a.value < 0
    out_val = np.where(neg, slope.value * a.value, a.value)

    def backward(g):
        ga = g * np.where(neg, slope.value, 1.0)
        gs = np.array([(g * np.where(neg, a.value, 0.0)).sum()])
        return ga, gs.reshape(slope.value.shape)

    return Tensor(out_val, parents=(a, slope), backward=backward)


def linear(x, weight, bias):
    """x (B,F) @ weight.T (F,O) + bias (O,)."""
    return add(matmul(x, transpose2d(weight)), bias)


def transpose2d(a):
    a = as_tensor(a)

    def backward(g):
        return (g.T,)

    return Tensor(a.value.T, parents=(a,), backward=backward)


def _im2col(x, kh, kw, pad):
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = h + 2 * pad - kh + 1, w + 2 * pad - kw + 1
    cols = np.empty((b, c, kh, kw, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + ho, j : j + wo]
    return cols.reshape(b, c * kh * kw, ho * wo), (ho, wo)


def _col2im(cols, xshape, kh, kw, pad):
    b, c, h, w = xshape
    ho, wo = h + 2 * pad - kh + 1, w + 2 * pad - kw + 1
    cols = cols.reshape(b, c, kh, kw, ho, wo)
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + ho, j : j + wo] += cols[:, :, i, j]
    return xp[:, :, pad : pad + h, pad : pad + w]


def conv2d(x, weight, bias, padding=1):
    """Stride-1 2-D convolution, NCHW layout, square zero padding."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    o, c, kh, kw = weight.value.shape
    cols, (ho, wo) = _im2col(x.value, kh, kw, padding)
    w2 = weight.value.reshape(o, -1)
    out_val = np.einsum("op,bpl->bol", w2, cols).reshape(-1, o, ho, wo)
    out_val += bias.value.reshape(1, o, 1, 1)

    def backward(g):
        g2 = g.reshape(g.shape[0], o, -1)
        gw = np.einsum("bol,bpl->op", g2, cols).reshape(weight.value.shape)
        gb = g2.sum(axis=(0, 2))
        gcols = np.einsum("op,bol->bpl", w2, g2)
        gx = _col2im(gcols, x.value.shape, kh, kw, padding)
        return gx, gw, gb

    return Tensor(out_val, parents=(x, weight, bias), backward=backward)


def avg_pool2d(x, kernel=1, stride=1):
    """Average pooling; kernel 1 / stride 1 degenerates to identity."""
    x = as_tensor(x)
    b, c, h, w = x.value.shape
    ho = (h - kernel) // stride + 1
    wo = (w - kernel) // stride + 1
    out_val = np.zeros((b, c, ho, wo))
    for i in range(kernel):
        for j in range(kernel):
            out_val += x.value[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride]
    out_val /= kernel * kernel

    def backward(g):
        gx = np.zeros_like(x.value)
        gk = g / (kernel * kernel)
        for i in range(kernel):
            for j in range(kernel):
                gx[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride] += gk
        return (gx,)

    return Tensor(out_val, parents=(x,), backward=backward)


@dataclass
class BatchNormState:
    """Running statistics; updated in-place during training forwards."""

    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-6
    momentum: float = 0.1


def batch_norm(x, gamma, beta, state, training):
    """Channel batch norm over (N,H,W); batch stats in training, running at eval."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    axes = (0, 2, 3)
    n = x.value.shape[0] * x.value.shape[2] * x.value.shape[3]
    if training:
        mean = x.value.mean(axis=axes)
        var = x.value.var(axis=axes)
        unbiased = var * n / max(n - 1, 1)
        state.running_mean = (1 - state.momentum) * state.running_mean + state.momentum * mean
        state.running_var = (1 - state.momentum) * state.running_var + state.momentum * unbiased
    else:
        mean, var = state.running_mean, state.running_var
    invstd = 1.0 / np.sqrt(var + state.eps)
    xc = x.value - mean.reshape(1, -1, 1, 1)
    xhat = xc * invstd.reshape(1, -1, 1, 1)
    out_val = gamma.value.reshape(1, -1, 1, 1) * xhat + beta.value.reshape(1, -1, 1, 1)

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gamma.value.reshape(1, -1, 1, 1)
        if training:
            s1 = gxhat.sum(axis=axes).reshape(1, -1, 1, 1)
            s2 = (gxhat * xhat).sum(axis=axes).reshape(1, -1, 1, 1)
            gx = (invstd.reshape(1, -1, 1, 1) / n) * (n * gxhat - s1 - xhat * s2)
        else:
            gx = gxhat * invstd.reshape(1, -1, 1, 1)
        return gx, ggamma, gbeta

    return Tensor(out_val, parents=(x, gamma, beta), backward=backward)


def batched_dot(const_mat, w):
    """(B,K,n) constant . (B,n) tensor -> (B,K); gradient flows to w only."""
    w = as_tensor(w)
    a = np.asarray(const_mat, dtype=float)
    out_val = np.einsum("bkn,bn->bk", a, w.value)

    def backward(g):
        return (np.einsum("bk,bkn->bn", g, a),)

    return Tensor(out_val, parents=(w,), backward=backward)


def batched_combine(const_mat, coeff):
    """sum_k coeff[b,k] * const_mat[b,k,:] -> (B,n); gradient flows to coeff."""
    coeff = as_tensor(coeff)
    a = np.asarray(const_mat, dtype=float)
    out_val = np.einsum("bkn,bk->bn", a, coeff.value)

    def backward(g):
        return (np.einsum("bn,bkn->bk", g, a),)

    return Tensor(out_val, parents=(coeff,), backward=backward)


def swap_halves(w):
    """Tape version of the Pi operator on (B, 2n) rows: [x; y] -> [-y; x]."""
    w = as_tensor(w)
    n = w.value.shape[-1] // 2
    out_val = np.concatenate([-w.value[..., n:], w.value[..., :n]], axis=-1)

    def backward(g):
        return (np.concatenate([g[..., n:], -g[..., :n]], axis=-1),)

    return Tensor(out_val, parents=(w,), backward=backward)


# -- optimizer ---------------------------------------------------------------


@dataclass
class AdamState:
    """First/second-moment accumulators keyed like the parameter dict."""

    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params):
    return AdamState(
        m={k: np.zeros_like(t.value) for k, t in params.items()},
        v={k: np.zeros_like(t.value) for k, t in params.items()},
    )


def adam_step(params, state, lr):
    """One Adam update over params with .grad populated; missing grads are skipped."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for name, tensor in params.items():
        if tensor.grad is None:
            continue
        g = tensor.grad
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        tensor.value = tensor.value - lr * m_hat / (np.sqrt(v_hat) + state.eps)


def xavier_uniform(rng, shape, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)
