"""A small dense tensor with reverse-mode automatic differentiation.

Only the operations the head network needs are provided. Arrays are float64
and laid out channels-last: images are ``(H, W, C)`` or batched
``(N, H, W, C)``; convolution kernels are ``(k, k, C_in, C_out)``.

Every operation returns a new tensor. When gradient tracking is enabled and at
least one input requires gradients, the result records its parents and a
closure mapping the output gradient to input gradients; :meth:`Tensor.backward`
replays these closures in reverse topological order.
"""

import contextlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from tsm.errors import DimensionError, StateError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        if self.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def is_finite(self):
        """Validity check: False if any value is NaN or infinite."""
        return bool(np.isfinite(self.data).all())

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def backward(self, grad=None):
        """Accumulate d(self)/d(t) into ``t.grad`` for every tracked ``t``.

        ``grad`` defaults to ones and may be omitted only for single-element
        tensors.
        """
        if not self.requires_grad:
            raise StateError("backward() called on a tensor that does not track gradients")
        if grad is None:
            if self.size != 1:
                raise StateError("backward() without an explicit gradient needs a scalar")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != self.shape:
                raise DimensionError(f"seed gradient shape {grad.shape} != {self.shape}")

        order = _topological_order(self)
        pending = {id(self): grad}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg

    # arithmetic -------------------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other)
        return _result(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape)),
        )

    __radd__ = __add__

    def __neg__(self):
        return _result(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-_as_tensor(other))

    def __rsub__(self, other):
        return _as_tensor(other) + (-self)

    def __mul__(self, other):
        other = _as_tensor(other)
        return _result(
            self.data * other.data,
            (self, other),
            lambda g: (
                _unbroadcast(g * other.data, self.shape),
                _unbroadcast(g * self.data, other.shape),
            ),
        )

    __rmul__ = __mul__

    def __matmul__(self, other):
        other = _as_tensor(other)
        a, b = self.data, other.data
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not agree")
        return _result(a @ b, (self, other), lambda g: (g @ b.T, a.T @ g))

    def sum(self):
        return _result(
            np.array(self.data.sum()),
            (self,),
            lambda g: (np.broadcast_to(g, self.shape).copy(),),
        )

    def mean(self):
        n = self.size
        return _result(
            np.array(self.data.mean()),
            (self,),
            lambda g: (np.broadcast_to(g / n, self.shape).copy(),),
        )

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        try:
            out = self.data.reshape(shape)
        except ValueError as exc:
            raise DimensionError(str(exc)) from None
        return _result(out, (self,), lambda g: (g.reshape(src),))


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _batched(x, rank, name):
    """Return (array with a leading batch axis, whether one was added)."""
    if x.ndim == rank:
        return x[None], True
    if x.ndim == rank + 1:
        return x, False
    raise DimensionError(f"{name}: expected {rank} or {rank + 1} dims, got shape {x.shape}")


# operations ----------------------------------------------------------------


def relu(x):
    mask = x.data > 0
    # np.maximum propagates NaN, so corrupt inputs surface as a NaN loss
    return _result(np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x):
    out = np.exp(-np.logaddexp(0.0, -x.data))
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),))


def broadcast_multiply(a, b):
    """Entrywise product with ``b`` repeated along its unit-extent axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != b.ndim or any(nb not in (1, na) for na, nb in zip(a.shape, b.shape)):
        raise DimensionError(f"cannot broadcast {b.shape} onto {a.shape}")
    return a * b


def reshape(x, shape):
    return x.reshape(shape)


def fully_connected(x, weights, bias):
    """``y = x @ W + b`` for ``x`` of shape ``(D,)`` or ``(N, D)``, ``W`` of ``(D, K)``."""
    if weights.ndim != 2 or bias.shape != (weights.shape[1],):
        raise DimensionError(f"weights {weights.shape} / bias {bias.shape} mismatch")
    if x.shape[-1] != weights.shape[0]:
        raise DimensionError(f"input dim {x.shape[-1]} != weight rows {weights.shape[0]}")
    if x.ndim == 1:
        return (x.reshape(1, -1) @ weights + bias).reshape(weights.shape[1])
    return x @ weights + bias


def conv2d(x, kernels, bias, padding="same"):
    """2-D cross-correlation, stride 1, channels-last.

    ``padding`` is ``"same"`` (zero fill, output keeps H and W) or ``"valid"``.
    """
    xb, squeeze = _batched(x.data, 3, "conv2d input")
    w = kernels.data
    if w.ndim != 4 or w.shape[0] != w.shape[1] or w.shape[0] % 2 == 0:
        raise DimensionError(f"kernels must be (k, k, Cin, Cout) with odd k, got {w.shape}")
    k, _, cin, cout = w.shape
    if xb.shape[-1] != cin:
        raise DimensionError(f"input has {xb.shape[-1]} channels, kernels expect {cin}")
    if bias.shape != (cout,):
        raise DimensionError(f"bias shape {bias.shape} != ({cout},)")
    if padding == "same":
        p = k // 2
    elif padding == "valid":
        p = 0
    else:
        raise ValueError(f"unknown padding mode {padding!r}")

    n, h, wd, _ = xb.shape
    xp = np.pad(xb, ((0, 0), (p, p), (p, p), (0, 0))) if p else xb
    ho, wo = xp.shape[1] - k + 1, xp.shape[2] - k + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"kernel {k} larger than input {h}x{wd}")
    cols = sliding_window_view(xp, (k, k), axis=(1, 2)).reshape(n * ho * wo, cin * k * k)
    wmat = w.transpose(2, 0, 1, 3).reshape(cin * k * k, cout)
    out = (cols @ wmat + bias.data).reshape(n, ho, wo, cout)

    def backward(g):
        g = g.reshape(n, ho, wo, cout)
        g2 = g.reshape(-1, cout)
        dw = (cols.T @ g2).reshape(cin, k, k, cout).transpose(1, 2, 0, 3)
        db = g2.sum(axis=0)
        dcols = (g2 @ wmat.T).reshape(n, ho, wo, cin, k, k)
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                dxp[:, i : i + ho, j : j + wo, :] += dcols[..., i, j]
        dx = dxp[:, p : p + h, p : p + wd, :]
        return (dx[0] if squeeze else dx), dw, db

    return _result(out[0] if squeeze else out, (x, kernels, bias), backward)


def pool_extent(n, kernel, stride, padding=0, ceil_mode=False):
    """Output length of a max pool along one axis."""
    span = n + 2 * padding - kernel
    if ceil_mode:
        out = -(-span // stride) + 1
        # the last window must start inside the input or its leading padding
        if out > 1 and (out - 1) * stride >= n + padding:
            out -= 1
    else:
        out = span // stride + 1 if span >= 0 else 0
    if out < 1:
        raise DimensionError(f"pool kernel {kernel} larger than padded input {n + 2 * padding}")
    return out


def maxpool2d(x, kernel, stride, ceil_mode=False, padding=(0, 0)):
    """Per-channel window maximum over ``(H, W, C)`` or ``(N, H, W, C)``.

    Padding is conceptually filled with -inf. In ceil mode, partial windows at
    the bottom/right border are kept.
    """
    kh, kw = kernel
    sh, sw = stride
    ph, pw = padding
    if min(kh, kw, sh, sw) < 1 or min(ph, pw) < 0:
        raise DimensionError(f"invalid pool geometry kernel={kernel} stride={stride}")
    xb, squeeze = _batched(x.data, 3, "maxpool2d input")
    n, h, w, c = xb.shape
    ho = pool_extent(h, kh, sh, ph, ceil_mode)
    wo = pool_extent(w, kw, sw, pw, ceil_mode)
    hp = max((ho - 1) * sh + kh, h + ph)
    wp = max((wo - 1) * sw + kw, w + pw)
    xp = np.full((n, hp, wp, c), -np.inf)
    xp[:, ph : ph + h, pw : pw + w, :] = xb

    slices = [
        (slice(None), slice(i, i + (ho - 1) * sh + 1, sh), slice(j, j + (wo - 1) * sw + 1, sw))
        for i in range(kh)
        for j in range(kw)
    ]
    stacked = np.stack([xp[s] for s in slices])
    idx = stacked.argmax(axis=0)
    out = np.take_along_axis(stacked, idx[None], axis=0)[0]

    def backward(g):
        g = g.reshape(n, ho, wo, c)
        dxp = np.zeros_like(xp)
        for o, s in enumerate(slices):
            dxp[s] += np.where(idx == o, g, 0.0)
        dx = dxp[:, ph : ph + h, pw : pw + w, :]
        return (dx[0] if squeeze else dx,)

    return _result(out[0] if squeeze else out, (x,), backward)


def softmax_cross_entropy(logits, labels):
    """Mean of ``-log softmax(logits)[label]``, stabilised by max-subtraction.

    ``logits`` is ``(K,)`` with an integer label, or ``(N, K)`` with N labels.
    """
    z = logits.data
    single = z.ndim == 1
    z2 = z[None] if single else z
    lab = np.atleast_1d(np.asarray(labels))
    if z2.ndim != 2 or lab.shape != (z2.shape[0],):
        raise DimensionError(f"logits {z.shape} and labels {lab.shape} disagree")
    if not np.issubdtype(lab.dtype, np.integer):
        raise IndexError("class labels must be integers")
    k = z2.shape[1]
    if (lab < 0).any() or (lab >= k).any():
        raise IndexError(f"label out of range for {k} classes")
    shifted = z2 - z2.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(len(lab))
    loss = np.mean(lse - shifted[rows, lab])

    def backward(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, lab] -= 1.0
        p *= g / len(lab)
        return (p[0] if single else p,)

    return _result(np.array(loss), (logits,), backward)


def dropout(x, rate, rng):
    """Inverted dropout; identity when ``rate`` is 0."""
    if rate <= 0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))
