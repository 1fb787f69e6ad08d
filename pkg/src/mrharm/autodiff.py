"""Dense float64 tensors with reverse-mode automatic differentiation.

Only the primitives needed by small convolutional encoder-decoder networks
are provided: 2-d convolution, affine (dense) layers, nearest-neighbor
upsampling, channel concatenation, leaky ReLU, sigmoid, Gumbel-softmax, and
the elementwise/reduction ops that the training losses are composed from.
No broadcasting beyond what those primitives need, no views of tensor data,
no global random state: every stochastic op takes an explicit generator.
"""

import numpy as np

__all__ = [
    "Tensor", "no_grad", "add", "sub", "mul", "mul_const", "add_const",
    "sum_all", "mean_all", "abs_", "exp_", "leaky_relu", "sigmoid", "spatial_mean",
    "dense", "conv2d", "nn_upsample2x", "upsample2x_concat",
    "concat_channels", "narrow", "reshape", "broadcast_spatial",
    "gumbel_softmax", "where_mask", "bce_with_logits", "mean_abs",
]

_grad_enabled = True


class no_grad:
    """Context manager that suppresses graph recording (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """A float64 array plus an optional gradient accumulator.

    Tensors form an implicit acyclic graph through parent links; calling
    ``backward()`` on a scalar result walks that graph once in reverse
    topological order. Gradients accumulate into leaves across repeated
    backward calls until ``zero_grad()``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._grad_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        out = Tensor(self.data)
        return out

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        ``self`` must be a scalar. Gradients of interior nodes are held in a
        scratch table and discarded; leaf gradients add onto any existing
        accumulator so repeated calls without ``zero_grad`` accumulate.
        """
        if self.data.size != 1:
            raise ValueError(
                f"backward() needs a scalar loss, got shape {self.data.shape}")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited and p.requires_grad:
                    stack.append((p, False))
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._grad_fn is None:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            for parent, pg in zip(node._parents, node._grad_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar for loss composition
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_const(self, float(other))

    __rmul__ = __mul__


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _from_op(data, parents, grad_fn):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


def _check_same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# elementwise / reductions

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b, "add")
    return _from_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b, "sub")
    return _from_op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b, "mul")
    return _from_op(a.data * b.data, (a, b),
                    lambda g: (g * b.data, g * a.data))


def mul_const(a, c):
    c = float(c)
    return _from_op(a.data * c, (a,), lambda g: (g * c,))


def add_const(a, c):
    c = float(c)
    return _from_op(a.data + c, (a,), lambda g: (g,))


def sum_all(a):
    def grad_fn(g):
        return (np.full_like(a.data, float(g)),)
    return _from_op(np.array(a.data.sum()), (a,), grad_fn)


def mean_all(a):
    n = a.data.size

    def grad_fn(g):
        return (np.full_like(a.data, float(g) / n),)
    return _from_op(np.array(a.data.mean()), (a,), grad_fn)


def abs_(a):
    def grad_fn(g):
        return (g * np.sign(a.data),)
    return _from_op(np.abs(a.data), (a,), grad_fn)


def exp_(a):
    out_data = np.exp(a.data)
    return _from_op(out_data, (a,), lambda g: (g * out_data,))


def leaky_relu(a, slope=0.2):
    mask = np.where(a.data > 0.0, 1.0, slope)
    return _from_op(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a):
    out_data = 1.0 / (1.0 + np.exp(-a.data))
    return _from_op(out_data, (a,),
                    lambda g: (g * out_data * (1.0 - out_data),))


def mean_abs(a, b):
    """Mean absolute difference, the L1 loss used throughout training."""
    return mean_all(abs_(sub(a, b)))


# ---------------------------------------------------------------------------
# shape ops

def reshape(a, shape):
    shape = tuple(shape)

    def grad_fn(g):
        return (g.reshape(a.data.shape),)
    return _from_op(a.data.reshape(shape), (a,), grad_fn)


def narrow(a, axis, start, length):
    """Contiguous slice of ``length`` entries along ``axis``."""
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def grad_fn(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)
    return _from_op(a.data[idx].copy(), (a,), grad_fn)


def concat_channels(tensors):
    """Concatenate along axis 1 (the channel axis)."""
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.data.shape[1] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(tensors)))
    return _from_op(np.concatenate([t.data for t in tensors], axis=1),
                    tuple(tensors), grad_fn)


def spatial_mean(x):
    """Average [N, C, H, W] over its spatial axes to [N, C]."""
    n, c, h, w = x.data.shape
    scale = 1.0 / (h * w)

    def grad_fn(g):
        return (np.broadcast_to(g[:, :, None, None] * scale,
                                x.data.shape).copy(),)
    return _from_op(x.data.mean(axis=(2, 3)), (x,), grad_fn)


def broadcast_spatial(v, h, w):
    """Expand [N, C] to [N, C, h, w] with constant spatial maps."""
    if v.data.ndim == 1:
        v = reshape(v, (1, v.data.shape[0]))
    n, c = v.data.shape
    data = np.broadcast_to(v.data[:, :, None, None], (n, c, h, w)).copy()

    def grad_fn(g):
        return (g.sum(axis=(2, 3)),)
    return _from_op(data, (v,), grad_fn)


def where_mask(mask, a, b):
    """mask*a + (1-mask)*b with a constant {0,1} mask array."""
    _check_same_shape(a, b, "where_mask")
    m = np.asarray(mask, dtype=np.float64)

    def grad_fn(g):
        return (g * m, g * (1.0 - m))
    return _from_op(m * a.data + (1.0 - m) * b.data, (a, b), grad_fn)


# ---------------------------------------------------------------------------
# layers

def dense(x, weight, bias):
    """Affine map: [N, D] @ [D, E] + [E]."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ValueError(
            f"dense: expected 2-d input and weight, got {x.data.shape} and "
            f"{weight.data.shape}")
    if x.data.shape[1] != weight.data.shape[0]:
        raise ValueError(
            f"dense: inner dimensions disagree, input {x.data.shape} vs "
            f"weight {weight.data.shape}")
    if bias.data.shape != (weight.data.shape[1],):
        raise ValueError(
            f"dense: bias shape {bias.data.shape} does not match output "
            f"width {weight.data.shape[1]}")
    out_data = x.data @ weight.data + bias.data

    def grad_fn(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return (gx, gw, gb)
    return _from_op(out_data, (x, weight, bias), grad_fn)


def conv2d(x, kernel, bias, stride=1, pad=0):
    """2-d convolution (cross-correlation) over [N, C, H, W].

    Kernel is [F, C, kH, kW]; output is [N, F, H', W'] with
    H' = (H + 2*pad - kH)/stride + 1, and the division must be exact.
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ValueError(
            f"conv2d: expected 4-d input and kernel, got {x.data.shape} and "
            f"{kernel.data.shape}")
    n, c, h, w = x.data.shape
    f, ck, kh, kw = kernel.data.shape
    if c != ck:
        raise ValueError(
            f"conv2d: input has {c} channels but kernel expects {ck}")
    if bias.data.shape != (f,):
        raise ValueError(
            f"conv2d: bias shape {bias.data.shape} does not match {f} filters")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d: bad stride/pad ({stride}, {pad})")
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise ValueError(
            f"conv2d: kernel {kh}x{kw} larger than padded input "
            f"{h + 2 * pad}x{w + 2 * pad}")
    if (h + 2 * pad - kh) % stride or (w + 2 * pad - kw) % stride:
        raise ValueError(
            f"conv2d: geometry ({h}x{w}, kernel {kh}x{kw}, pad {pad}) is not "
            f"divisible by stride {stride}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    kmat = kernel.data.reshape(f, ck * kh * kw)

    # one reshape copy of the [N, C, Ho, Wo, kH, kW] strided window view
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(
        win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw))
    out_data = (cols @ kmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2) \
        + bias.data[None, :, None, None]
    if not (_grad_enabled and kernel.requires_grad):
        cols = None  # free the buffer when no backward will need it

    def grad_fn(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, f)
        gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        gk = None
        if kernel.requires_grad:
            gk = (gm.T @ cols).reshape(kernel.data.shape)
        gx = None
        if x.requires_grad:
            gcols = (gm @ kmat).reshape(n, ho, wo, c, kh, kw)
            gcols = gcols.transpose(0, 3, 4, 5, 1, 2)  # N, C, kH, kW, Ho, Wo
            gxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * (ho - 1) + 1:stride,
                        j:j + stride * (wo - 1) + 1:stride] += gcols[:, :, i, j]
            gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        return (gx, gk, gb)
    return _from_op(out_data, (x, kernel, bias), grad_fn)


def nn_upsample2x(x):
    """Nearest-neighbor 2x upsampling of [N, C, H, W]."""
    data = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    n, c, h, w = x.data.shape

    def grad_fn(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)
    return _from_op(data, (x,), grad_fn)


def upsample2x_concat(low, skip):
    """Nearest-neighbor upsample ``low`` by 2x and channel-concat ``skip``.

    ``skip`` must have exactly double the spatial extent of ``low``.
    """
    ln, lc, lh, lw = low.data.shape
    sn, sc, sh, sw = skip.data.shape
    if (sh, sw) != (2 * lh, 2 * lw) or sn != ln:
        raise ValueError(
            f"upsample2x_concat: skip {skip.data.shape} is not the 2x "
            f"spatial partner of low {low.data.shape}")
    return concat_channels([nn_upsample2x(low), skip])


def gumbel_softmax(logits, temperature, rng):
    """Gumbel-softmax relaxation over the channel axis (axis 1).

    Noise g = -log(-log(u)) is drawn from ``rng`` and treated as a constant
    in the backward pass, so gradients flow to the logits only. Output
    channels are nonnegative and sum to one at every location.
    """
    if temperature <= 0:
        raise ValueError(f"gumbel_softmax: temperature must be > 0, got {temperature}")
    if logits.data.ndim < 2 or logits.data.shape[1] < 2:
        raise ValueError(
            f"gumbel_softmax: need at least 2 channels on axis 1, got shape "
            f"{logits.data.shape}")
    u = rng.random(size=logits.data.shape)
    noise = -np.log(-np.log(u + 1e-20) + 1e-20)
    z = (logits.data + noise) / temperature
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def grad_fn(g):
        inner = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - inner) / temperature,)
    return _from_op(y, (logits,), grad_fn)


def bce_with_logits(logits, targets, weights=None):
    """Mean binary cross-entropy from raw logits (numerically stable).

    ``targets`` (and optional nonnegative ``weights``) are constant arrays.
    With weights, returns sum(w * loss) / sum(w); an all-zero weight vector
    yields an exact zero with no gradient.
    """
    t = np.asarray(targets, dtype=np.float64)
    z = logits.data
    if t.shape != z.shape:
        raise ValueError(f"bce_with_logits: target shape {t.shape} vs logits {z.shape}")
    if weights is None:
        w = np.ones_like(z)
    else:
        w = np.asarray(weights, dtype=np.float64)
    wsum = w.sum()
    if wsum == 0.0:
        return Tensor(0.0)
    per = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    val = (w * per).sum() / wsum

    def grad_fn(g):
        s = 1.0 / (1.0 + np.exp(-z))
        return (float(g) * w * (s - t) / wsum,)
    return _from_op(np.array(val), (logits,), grad_fn)
