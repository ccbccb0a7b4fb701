"""Minimal layer engine with exact backpropagation on NCHW numpy arrays.

Layers cache what their backward pass needs; forward/backward are pure given
(parameters, input, seed). Dropout masks are a deterministic function of
(seed, step counter). Compute dtype follows the parameter dtype: float32 for
training, float64 for finite-difference verification.
"""

from __future__ import annotations

import numpy as np

from .hashutil import fnv1a64


class ShapeMismatch(ValueError):
    pass


class IndexOutOfRange(ValueError):
    pass


def seeded_rng(seed: int, *tags: str) -> np.random.Generator:
    """Generator keyed by a base seed plus stable string tags."""
    return np.random.default_rng([seed & 0xFFFFFFFF] + [fnv1a64(t) for t in tags])


def he_uniform(shape, fan_in: int, rng: np.random.Generator, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    """Base layer: list-in/single-out forward, matching-list backward."""

    kind = "layer"
    n_inputs = 1

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.trainable = True

    def forward(self, xs: list[np.ndarray], mode: str) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> list[np.ndarray]:
        raise NotImplementedError

    def out_shape(self, in_shapes: list[tuple[int, ...]]) -> tuple[int, ...]:
        raise NotImplementedError

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def _one(self, xs):
        if len(xs) != self.n_inputs:
            raise ShapeMismatch(f"{self.kind} expects {self.n_inputs} input(s), got {len(xs)}")
        return xs[0]


class Conv2d(Layer):
    """Cross-correlation with zero padding (no kernel flip)."""

    kind = "conv2d"

    def __init__(self, in_ch, out_ch, kernel, stride=1, pad=0, *,
                 bias=True, rng=None, dtype=np.float32):
        super().__init__()
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride, self.pad = kernel, stride, pad
        rng = rng or np.random.default_rng(0)
        fan_in = in_ch * kernel * kernel
        self.params["w"] = he_uniform((out_ch, in_ch, kernel, kernel), fan_in, rng, dtype)
        if bias:
            # convs directly followed by batchnorm are built bias-free: the
            # normalization cancels any constant shift
            self.params["b"] = np.zeros(out_ch, dtype=dtype)

    def _out_hw(self, h, w):
        k, s, p = self.kernel, self.stride, self.pad
        ho, wo = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
        if h + 2 * p < k or w + 2 * p < k or ho < 1 or wo < 1:
            raise ShapeMismatch(
                f"conv2d k={k} s={s} p={p} cannot consume input {h}x{w}")
        return ho, wo

    def out_shape(self, in_shapes):
        n, c, h, w = in_shapes[0]
        if c != self.in_ch:
            raise ShapeMismatch(f"conv2d expects {self.in_ch} channels, got {c}")
        ho, wo = self._out_hw(h, w)
        return (n, self.out_ch, ho, wo)

    def forward(self, xs, mode):
        x = self._one(xs)
        n, c, h, w = x.shape
        if c != self.in_ch:
            raise ShapeMismatch(f"conv2d expects {self.in_ch} channels, got {c}")
        k, s, p = self.kernel, self.stride, self.pad
        ho, wo = self._out_hw(h, w)
        if k == 1 and s == 1 and p == 0:
            # pointwise conv: a channel matmul, no window gathering
            out = np.tensordot(x, self.params["w"][:, :, 0, 0], axes=([1], [1]))
            out = out.transpose(0, 3, 1, 2)
            if "b" in self.params:
                out = out + self.params["b"][:, None, None]
            self._cache = (x.shape, x)
            return out
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
        win = win[:, :, ::s, ::s]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
        wmat = self.params["w"].reshape(self.out_ch, -1)
        out = cols @ wmat.T
        if "b" in self.params:
            out = out + self.params["b"]
        self._cache = (x.shape, cols)
        return out.reshape(n, ho, wo, self.out_ch).transpose(0, 3, 1, 2)

    def backward(self, dout):
        (n, c, h, w), cache = self._cache
        k, s, p = self.kernel, self.stride, self.pad
        _, _, ho, wo = dout.shape
        if k == 1 and s == 1 and p == 0:
            x = cache
            dw = np.tensordot(dout, x, axes=([0, 2, 3], [0, 2, 3]))
            self.grads["w"] = dw[:, :, None, None]
            if "b" in self.params:
                self.grads["b"] = dout.sum(axis=(0, 2, 3))
            dx = np.tensordot(dout, self.params["w"][:, :, 0, 0], axes=([1], [0]))
            return [dx.transpose(0, 3, 1, 2)]
        cols = cache
        dmat = dout.transpose(0, 2, 3, 1).reshape(n * ho * wo, self.out_ch)
        self.grads["w"] = (dmat.T @ cols).reshape(self.params["w"].shape)
        if "b" in self.params:
            self.grads["b"] = dmat.sum(axis=0)
        wgt = self.params["w"]
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=dout.dtype)
        for ky in range(k):
            for kx in range(k):
                contrib = np.tensordot(dout, wgt[:, :, ky, kx], axes=([1], [0]))
                dxp[:, :, ky:ky + s * ho:s, kx:kx + s * wo:s] += contrib.transpose(0, 3, 1, 2)
        return [dxp[:, :, p:p + h, p:p + w] if p else dxp]


class BatchNorm(Layer):
    """Channel-wise batch normalization. A frozen instance always runs with
    its running statistics and never updates them (eval fine-tune rule)."""

    kind = "batchnorm"

    def __init__(self, channels, eps=1e-5, momentum=0.9, *, dtype=np.float32):
        super().__init__()
        self.channels, self.eps, self.momentum = channels, eps, momentum
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)

    def out_shape(self, in_shapes):
        shape = in_shapes[0]
        if shape[1] != self.channels:
            raise ShapeMismatch(f"batchnorm expects {self.channels} channels, got {shape[1]}")
        return shape

    def _bshape(self, ndim):
        return (1, self.channels) + (1,) * (ndim - 2)

    def forward(self, xs, mode):
        x = self._one(xs)
        if x.shape[1] != self.channels:
            raise ShapeMismatch(f"batchnorm expects {self.channels} channels, got {x.shape[1]}")
        axes = tuple(i for i in range(x.ndim) if i != 1)
        bs = self._bshape(x.ndim)
        training = mode == "train" and self.trainable
        if training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = self.momentum
            self.buffers["running_mean"][:] = m * self.buffers["running_mean"] + (1 - m) * mean
            self.buffers["running_var"][:] = m * self.buffers["running_var"] + (1 - m) * var
        else:
            mean = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean.reshape(bs)) * inv_std.reshape(bs)
        self._cache = (xhat, inv_std, axes, training, x.shape)
        return self.params["gamma"].reshape(bs) * xhat + self.params["beta"].reshape(bs)

    def backward(self, dout):
        xhat, inv_std, axes, training, x_shape = self._cache
        bs = self._bshape(len(x_shape))
        self.grads["gamma"] = (dout * xhat).sum(axis=axes)
        self.grads["beta"] = dout.sum(axis=axes)
        gamma = self.params["gamma"].reshape(bs)
        if not training:
            return [dout * gamma * inv_std.reshape(bs)]
        dxhat = dout * gamma
        dx = (dxhat
              - dxhat.mean(axis=axes, keepdims=True)
              - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)
              ) * inv_std.reshape(bs)
        return [dx]


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features, out_features, *, rng=None, dtype=np.float32):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        rng = rng or np.random.default_rng(0)
        self.params["w"] = he_uniform((in_features, out_features), in_features, rng, dtype)
        self.params["b"] = np.zeros(out_features, dtype=dtype)

    def out_shape(self, in_shapes):
        n, f = in_shapes[0]
        if f != self.in_features:
            raise ShapeMismatch(f"dense expects {self.in_features} features, got {f}")
        return (n, self.out_features)

    def forward(self, xs, mode):
        x = self._one(xs)
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeMismatch(f"dense expects [N,{self.in_features}], got {x.shape}")
        self._cache = x
        return x @ self.params["w"] + self.params["b"]

    def backward(self, dout):
        x = self._cache
        self.grads["w"] = x.T @ dout
        self.grads["b"] = dout.sum(axis=0)
        return [dout @ self.params["w"].T]


class ReLU(Layer):
    kind = "relu"

    def out_shape(self, in_shapes):
        return in_shapes[0]

    def forward(self, xs, mode):
        x = self._one(xs)
        self._mask = x > 0
        return np.where(self._mask, x, 0)

    def backward(self, dout):
        return [np.where(self._mask, dout, 0)]


class _Pool(Layer):
    def __init__(self, kernel, stride=None, pad=0):
        super().__init__()
        self.kernel = kernel
        self.stride = stride if stride is not None else kernel
        self.pad = pad

    def _out_hw(self, h, w):
        k, s, p = self.kernel, self.stride, self.pad
        if h + 2 * p < k or w + 2 * p < k:
            raise ShapeMismatch(f"{self.kind} k={k} cannot consume input {h}x{w}")
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def out_shape(self, in_shapes):
        n, c, h, w = in_shapes[0]
        ho, wo = self._out_hw(h, w)
        return (n, c, ho, wo)

    def _windows(self, x):
        p = self.pad
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        win = np.lib.stride_tricks.sliding_window_view(
            xp, (self.kernel, self.kernel), axis=(2, 3))
        return win[:, :, ::self.stride, ::self.stride]


class MaxPool(_Pool):
    kind = "maxpool"

    def forward(self, xs, mode):
        x = self._one(xs)
        win = self._windows(x)
        n, c, ho, wo = win.shape[:4]
        flat = win.reshape(n, c, ho, wo, -1)
        self._argmax = flat.argmax(axis=-1)  # ties: first index, fixed scan order
        self._x_shape = x.shape
        return flat.max(axis=-1)

    def backward(self, dout):
        n, c, h, w = self._x_shape
        k, s, p = self.kernel, self.stride, self.pad
        _, _, ho, wo = dout.shape
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=dout.dtype)
        ky, kx = self._argmax // k, self._argmax % k
        ni = np.arange(n)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        rows = np.arange(ho)[None, None, :, None] * s + ky
        cols = np.arange(wo)[None, None, None, :] * s + kx
        np.add.at(dxp, (ni, ci, rows, cols), dout)
        return [dxp[:, :, p:p + h, p:p + w] if p else dxp]


class AvgPool(_Pool):
    """Average pooling; zero padding counts toward the window size."""

    kind = "avgpool"

    def forward(self, xs, mode):
        x = self._one(xs)
        win = self._windows(x)
        self._x_shape = x.shape
        return win.mean(axis=(-2, -1))

    def backward(self, dout):
        n, c, h, w = self._x_shape
        k, s, p = self.kernel, self.stride, self.pad
        _, _, ho, wo = dout.shape
        share = dout / (k * k)
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=dout.dtype)
        for ky in range(k):
            for kx in range(k):
                dxp[:, :, ky:ky + s * ho:s, kx:kx + s * wo:s] += share
        return [dxp[:, :, p:p + h, p:p + w] if p else dxp]


class GlobalAvgPool(Layer):
    kind = "globalavgpool"

    def out_shape(self, in_shapes):
        n, c, _, _ = in_shapes[0]
        return (n, c)

    def forward(self, xs, mode):
        x = self._one(xs)
        self._x_shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, dout):
        n, c, h, w = self._x_shape
        return [np.broadcast_to(dout[:, :, None, None], (n, c, h, w)) / (h * w)]


class Dropout(Layer):
    """Inverted dropout; the mask is a pure function of (seed, step)."""

    kind = "dropout"

    def __init__(self, rate, seed=0):
        super().__init__()
        if not 0 <= rate < 1:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.seed = seed
        self.step = 0

    def out_shape(self, in_shapes):
        return in_shapes[0]

    def forward(self, xs, mode):
        x = self._one(xs)
        if mode != "train" or self.rate == 0.0:
            self._mask = None
            return x
        rng = np.random.default_rng([self.seed & 0xFFFFFFFF, self.step])
        self._mask = (rng.random(x.shape) >= self.rate) / np.asarray(1.0 - self.rate, dtype=x.dtype)
        return x * self._mask

    def backward(self, dout):
        if self._mask is None:
            return [dout]
        return [dout * self._mask]


class Softmax(Layer):
    kind = "softmax"

    def out_shape(self, in_shapes):
        return in_shapes[0]

    def forward(self, xs, mode):
        x = self._one(xs)
        self._y = softmax(x)
        return self._y

    def backward(self, dout):
        y = self._y
        return [y * (dout - (dout * y).sum(axis=-1, keepdims=True))]


class Concat(Layer):
    """Channel concatenation of two or more branches."""

    kind = "concat"
    n_inputs = None  # variadic

    def __init__(self, axis=1):
        super().__init__()
        self.axis = axis

    def out_shape(self, in_shapes):
        first = list(in_shapes[0])
        for s in in_shapes[1:]:
            if len(s) != len(first) or any(
                    a != b for i, (a, b) in enumerate(zip(s, first)) if i != self.axis):
                raise ShapeMismatch(f"concat shapes incompatible: {in_shapes}")
            first[self.axis] += s[self.axis]
        return tuple(first)

    def forward(self, xs, mode):
        self.out_shape([x.shape for x in xs])
        self._sizes = [x.shape[self.axis] for x in xs]
        return np.concatenate(xs, axis=self.axis)

    def backward(self, dout):
        splits = np.cumsum(self._sizes[:-1])
        return list(np.split(dout, splits, axis=self.axis))


class ResidualScaleAdd(Layer):
    """out = shortcut + alpha * branch. Inputs: [shortcut, branch]."""

    kind = "residual_scale_add"
    n_inputs = 2

    def __init__(self, alpha):
        super().__init__()
        self.alpha = float(alpha)

    def out_shape(self, in_shapes):
        if in_shapes[0] != in_shapes[1]:
            raise ShapeMismatch(f"residual add shapes differ: {in_shapes}")
        return in_shapes[0]

    def forward(self, xs, mode):
        if len(xs) != 2 or xs[0].shape != xs[1].shape:
            raise ShapeMismatch("residual add needs two equal-shaped inputs")
        return xs[0] + self.alpha * xs[1]

    def backward(self, dout):
        return [dout, self.alpha * dout]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean negative log softmax probability of the true class.

    Returns (loss, dloss/dlogits) with the gradient already divided by the
    batch size.
    """
    labels = np.asarray(labels, dtype=np.int64).ravel()
    n, k = logits.shape
    if labels.size != n:
        raise ShapeMismatch(f"{n} logit rows but {labels.size} labels")
    if labels.min() < 0 or labels.max() >= k:
        raise IndexOutOfRange(f"labels must lie in [0, {k})")
    z = logits - logits.max(axis=-1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    loss = float(-log_probs[np.arange(n), labels].mean())
    grad = np.exp(log_probs)
    grad[np.arange(n), labels] -= 1.0
    return loss, (grad / n).astype(logits.dtype)


class SgdMomentum:
    """v <- mu*v + g; w <- w - lr*v."""

    algorithm = "sgd_momentum"

    def __init__(self, lr=0.01, momentum=0.9):
        self.lr, self.momentum = lr, momentum
        self.velocity: dict[str, np.ndarray] = {}
        self.step_count = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.step_count += 1
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ShapeMismatch(f"{name}: grad {g.shape} vs param {p.shape}")
            v = self.velocity.setdefault(name, np.zeros_like(p))
            v *= self.momentum
            v += g
            p -= self.lr * v


class Adam:
    """Standard bias-corrected Adam."""

    algorithm = "adam"

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def step(self, params, grads) -> None:
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ShapeMismatch(f"{name}: grad {g.shape} vs param {p.shape}")
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(algorithm: str, **kwargs):
    if algorithm == "adam":
        return Adam(**kwargs)
    if algorithm == "sgd_momentum":
        return SgdMomentum(**kwargs)
    raise ValueError(f"unknown optimizer {algorithm!r}")


class Sequential:
    """Single-input layer chain; enough structure for gradient checking."""

    def __init__(self, layers: list[Layer], names: list[str] | None = None):
        self.layers = layers
        self.names = names or [f"{i}.{l.kind}" for i, l in enumerate(layers)]

    def forward(self, x, mode="train"):
        for layer in self.layers:
            x = layer.forward([x], mode)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            (dout,) = layer.backward(dout)
        return dout

    def named_params(self):
        for name, layer in zip(self.names, self.layers):
            for key, arr in layer.params.items():
                yield f"{name}/{key}", layer, key, arr

    def named_grads(self):
        return {f"{n}/{k}": layer.grads[k]
                for n, layer, k, _ in self.named_params() if k in layer.grads}


def gradient_check(net, x: np.ndarray, h: float = 1e-4, seed: int = 0,
                   fault_param: str | None = None, fault_scale: float = 2.0,
                   check_input: bool = True) -> float:
    """Max relative error between backprop and central-difference gradients.

    ``net`` needs forward/backward/named_params (Sequential or a model graph).
    Run at double precision. ``fault_param`` multiplies that parameter's
    analytic gradient by ``fault_scale`` so detector sanity can be verified.
    """
    rng = np.random.default_rng(seed)
    out = net.forward(x, "train")
    r = rng.standard_normal(out.shape)

    def loss_at():
        return float((net.forward(x, "train") * r).sum())

    dx = net.backward(r)
    analytic = {name: layer.grads[key].copy()
                for name, layer, key, _ in net.named_params()}
    if fault_param is not None:
        analytic[fault_param] = analytic[fault_param] * fault_scale

    def rel_err(a, n):
        return np.max(np.abs(a - n) / np.maximum(1e-12, np.abs(a) + np.abs(n)))

    worst = 0.0
    for name, _, _, arr in net.named_params():
        num = np.zeros_like(arr, dtype=np.float64)
        flat = arr.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_at()
            flat[i] = orig - h
            down = loss_at()
            flat[i] = orig
            nflat[i] = (up - down) / (2 * h)
        worst = max(worst, rel_err(analytic[name], num))
    if check_input:
        num = np.zeros_like(x, dtype=np.float64)
        flat = x.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_at()
            flat[i] = orig - h
            down = loss_at()
            flat[i] = orig
            nflat[i] = (up - down) / (2 * h)
        worst = max(worst, rel_err(dx if isinstance(dx, np.ndarray) else dx[0], num))
    return float(worst)
