"""Minimal function-approximation stack on numpy.

A small reverse-mode tape (`Tensor`) drives dense tanh networks, a
diagonal-Gaussian action head, a permutation-invariant point-set encoder,
and Adam. Everything is float64 and seeded: initialization and sampling
take explicit numpy Generators, so runs are bit-reproducible.
"""

from __future__ import annotations

import math

import numpy as np

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
LOG_2PI = math.log(2.0 * math.pi)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to `shape` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """Node in the reverse-mode tape; wraps a float64 ndarray."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    # -- graph --------------------------------------------------------------

    def backward(self, grad=None):
        if grad is None:
            grad = np.ones_like(self.data)
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
        for node in order:
            node.grad = np.zeros_like(node.data)
        self.grad = np.asarray(grad, dtype=np.float64)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    # -- ops ----------------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        out = Tensor(self.data + other.data, parents=(self, other))

        def bwd(g):
            if self.requires_grad:
                self.grad += _unbroadcast(g, self.data.shape)
            if other.requires_grad:
                other.grad += _unbroadcast(g, other.data.shape)
        out._backward = bwd
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data, parents=(self,))

        def bwd(g):
            if self.requires_grad:
                self.grad += _unbroadcast(-g, self.data.shape)
        out._backward = bwd
        return out

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        out = Tensor(self.data * other.data, parents=(self, other))

        def bwd(g):
            if self.requires_grad:
                self.grad += _unbroadcast(g * other.data, self.data.shape)
            if other.requires_grad:
                other.grad += _unbroadcast(g * self.data, other.data.shape)
        out._backward = bwd
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        out = Tensor(self.data / other.data, parents=(self, other))

        def bwd(g):
            if self.requires_grad:
                self.grad += _unbroadcast(g / other.data, self.data.shape)
            if other.requires_grad:
                other.grad += _unbroadcast(-g * self.data / other.data**2, other.data.shape)
        out._backward = bwd
        return out

    def __matmul__(self, other):
        other = as_tensor(other)
        out = Tensor(self.data @ other.data, parents=(self, other))

        def bwd(g):
            if self.requires_grad:
                self.grad += _unbroadcast(g @ np.swapaxes(other.data, -1, -2), self.data.shape)
            if other.requires_grad:
                a2 = self.data.reshape(-1, self.data.shape[-1])
                g2 = g.reshape(-1, g.shape[-1])
                other.grad += _unbroadcast((a2.T @ g2).reshape(other.data.shape), other.data.shape)
        out._backward = bwd
        return out

    def square(self):
        return self * self

    def tanh(self):
        y = np.tanh(self.data)
        out = Tensor(y, parents=(self,))

        def bwd(g):
            if self.requires_grad:
                self.grad += g * (1.0 - y * y)
        out._backward = bwd
        return out

    def exp(self):
        y = np.exp(self.data)
        out = Tensor(y, parents=(self,))

        def bwd(g):
            if self.requires_grad:
                self.grad += g * y
        out._backward = bwd
        return out

    def log(self):
        out = Tensor(np.log(self.data), parents=(self,))

        def bwd(g):
            if self.requires_grad:
                self.grad += g / self.data
        out._backward = bwd
        return out

    def clip(self, lo, hi):
        """Hard clamp; gradient is zero outside [lo, hi]."""
        mask = (self.data >= lo) & (self.data <= hi)
        out = Tensor(np.clip(self.data, lo, hi), parents=(self,))

        def bwd(g):
            if self.requires_grad:
                self.grad += g * mask
        out._backward = bwd
        return out

    def sum(self, axis=None, keepdims=False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), parents=(self,))

        def bwd(g):
            if not self.requires_grad:
                return
            if axis is None:
                self.grad += np.broadcast_to(g, self.data.shape)
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                self.grad += np.broadcast_to(gg, self.data.shape)
        out._backward = bwd
        return out

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) / float(n)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; the smaller branch carries the gradient (ties -> a)."""
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data <= b.data
    out = Tensor(np.where(take_a, a.data, b.data), parents=(a, b))

    def bwd(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g * take_a, a.data.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g * ~take_a, b.data.shape)
    out._backward = bwd
    return out


def concat(parts, axis=-1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis), parents=tuple(parts))
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for p, piece in zip(parts, np.split(g, splits, axis=axis)):
            if p.requires_grad:
                p.grad += piece
    out._backward = bwd
    return out


def masked_maxpool(x: Tensor, mask: np.ndarray, default: Tensor) -> Tensor:
    """Max over the point axis of (B, N, H) restricted to mask (B, N); rows
    with no valid points take the learned `default` (H,) instead."""
    x = as_tensor(x)
    default = as_tensor(default)
    B, N, H = x.data.shape
    any_valid = mask.any(axis=1)
    neg = np.where(mask[:, :, None], x.data, -np.inf)
    arg = np.argmax(neg, axis=1)                      # (B, H)
    pooled = np.take_along_axis(x.data, arg[:, None, :], axis=1)[:, 0, :]
    data = np.where(any_valid[:, None], pooled, default.data[None, :])
    out = Tensor(data, parents=(x, default))

    def bwd(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            rows = np.repeat(np.arange(B), H)
            cols = np.tile(np.arange(H), B)
            sel = any_valid[:, None] * g
            np.add.at(gx, (rows, arg.ravel(), cols), sel.ravel())
            x.grad += gx
        if default.requires_grad:
            default.grad += (g * ~any_valid[:, None]).sum(axis=0)
    out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# modules


class Module:
    """Named-parameter container."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True)
        self._params[name] = t
        return t

    def parameters(self) -> dict[str, Tensor]:
        return dict(self._params)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_state_dict(self, doc: dict):
        missing = set(self._params) - set(doc)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, t in self._params.items():
            arr = np.asarray(doc[k], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {t.data.shape}")
            t.data = arr.copy()

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


class Mlp(Module):
    """Dense network, tanh hidden activations, identity output."""

    def __init__(self, sizes, rng: np.random.Generator, out_scale: float = 1.0,
                 final_bias: bool = True, prefix: str = "mlp"):
        super().__init__()
        self.sizes = list(sizes)
        self.final_bias = final_bias
        self.weights = []
        self.biases = []
        n_layers = len(self.sizes) - 1
        for i, (a, b) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            w = _xavier(rng, a, b)
            if i == n_layers - 1:
                w = w * out_scale
            self.weights.append(self.add_param(f"{prefix}.w{i}", w))
            if i < n_layers - 1 or final_bias:
                self.biases.append(self.add_param(f"{prefix}.b{i}", np.zeros(b)))
            else:
                self.biases.append(None)

    def __call__(self, x) -> Tensor:
        h = as_tensor(x)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w
            if b is not None:
                h = h + b
            if i < last:
                h = h.tanh()
        return h


def forward(net: Mlp, x: np.ndarray) -> np.ndarray:
    """Plain forward evaluation (no grads)."""
    return net(np.asarray(x, dtype=np.float64)).data


def backward(net: Mlp, x: np.ndarray, upstream: np.ndarray) -> dict[str, np.ndarray]:
    """Parameter gradients of sum(net(x) * upstream), i.e. reverse-mode with
    the given output adjoint."""
    net.zero_grad()
    out = net(np.asarray(x, dtype=np.float64))
    out.backward(np.asarray(upstream, dtype=np.float64))
    return {k: v.grad.copy() for k, v in net.parameters().items()}


# ---------------------------------------------------------------------------
# diagonal Gaussian head


class DiagGaussian:
    """Diagonal Gaussian with clamped log standard deviations."""

    def __init__(self, mean, log_std):
        self.mean = as_tensor(mean)
        self.log_std = as_tensor(log_std).clip(LOG_STD_MIN, LOG_STD_MAX)

    @property
    def std(self) -> Tensor:
        return self.log_std.exp()

    def logprob(self, action) -> Tensor:
        a = as_tensor(action)
        z = (a - self.mean) * (-self.log_std).exp()
        per = z.square() * 0.5 + self.log_std + 0.5 * LOG_2PI
        return -per.sum(axis=-1)

    def sample(self, rng: np.random.Generator):
        """Reparametrized draw; returns (sample, eps) as arrays."""
        eps = rng.standard_normal(self.mean.data.shape)
        return self.mean.data + np.exp(self.log_std.data) * eps, eps

    def entropy(self) -> Tensor:
        per = self.log_std + 0.5 * (1.0 + LOG_2PI)
        return per.sum(axis=-1)


def gaussian_logprob(dist: DiagGaussian, action) -> np.ndarray:
    return dist.logprob(action).data


def gaussian_sample(dist: DiagGaussian, rng: np.random.Generator) -> np.ndarray:
    return dist.sample(rng)[0]


def gaussian_entropy(dist: DiagGaussian) -> np.ndarray:
    return dist.entropy().data


# ---------------------------------------------------------------------------
# point-set encoder


class PointSetEncoder(Module):
    """Permutation- and duplication-invariant set encoder: a shared
    per-point network, coordinatewise max over valid points (a learned
    default vector stands in for empty sets), and a post-pool network."""

    def __init__(self, point_dim: int, rng: np.random.Generator,
                 per_point=(64, 64), out_dim: int = 128, prefix: str = "penc"):
        super().__init__()
        self.per_point = Mlp([point_dim, *per_point], rng, prefix=f"{prefix}.pp")
        self.post = Mlp([per_point[-1], out_dim], rng, prefix=f"{prefix}.post")
        self.default = self.add_param(f"{prefix}.default", np.zeros(per_point[-1]))
        for k, v in self.per_point.parameters().items():
            self._params[k] = v
        for k, v in self.post.parameters().items():
            self._params[k] = v
        self.out_dim = out_dim

    def __call__(self, points: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
        """points: (B, N, point_dim); mask: (B, N) validity. N may be 0."""
        pts = np.asarray(points, dtype=np.float64)
        B, N = pts.shape[0], pts.shape[1]
        if mask is None:
            mask = np.ones((B, N), dtype=bool)
        if N == 0:
            pooled = Tensor(np.zeros((B, self.per_point.sizes[-1]))) \
                + self.default
        else:
            h = self.per_point(pts).tanh()
            pooled = masked_maxpool(h, mask, self.default)
        return self.post(pooled)


def encode_points(enc: PointSetEncoder, points: np.ndarray,
                  extra: np.ndarray | None = None,
                  mask: np.ndarray | None = None) -> np.ndarray:
    """Feature vector for a point set (N, 2) with optional per-point extra
    channels (N, F); returns (out_dim,)."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ValueError("points must be (N, coords)")
    if extra is not None:
        pts = np.concatenate([pts, np.asarray(extra, dtype=np.float64)], axis=1)
    m = None if mask is None else np.asarray(mask, dtype=bool)[None, :]
    return enc(pts[None], m).data[0]


# ---------------------------------------------------------------------------
# Adam


def adam_step(params: dict, grads: dict, moments: dict, t: int, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update over name-keyed arrays. `moments`
    maps name -> (m, v) and may start empty; returns (params, moments)."""
    if t < 1:
        raise ValueError("Adam step index starts at 1")
    out_p, out_m = {}, {}
    for k, p in params.items():
        g = grads[k]
        m, v = moments.get(k, (np.zeros_like(p), np.zeros_like(p)))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        mh = m / (1.0 - beta1**t)
        vh = v / (1.0 - beta2**t)
        out_p[k] = p - lr * mh / (np.sqrt(vh) + eps)
        out_m[k] = (m, v)
    return out_p, out_m


class Adam:
    """Stateful Adam over one or more Modules."""

    def __init__(self, modules, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.modules = list(modules)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.moments: dict[str, tuple] = {}

    def _named(self):
        for mod in self.modules:
            for k, p in mod.parameters().items():
                yield k, p

    def step(self):
        self.t += 1
        params = {}
        grads = {}
        for k, p in self._named():
            params[k] = p.data
            grads[k] = p.grad if p.grad is not None else np.zeros_like(p.data)
        new_p, self.moments = adam_step(params, grads, self.moments, self.t,
                                        self.lr, self.beta1, self.beta2, self.eps)
        for k, p in self._named():
            p.data = new_p[k]

    def zero_grad(self):
        for mod in self.modules:
            mod.zero_grad()


# ---------------------------------------------------------------------------
# finite-difference oracle


def finite_difference_check(loss_fn, modules, h: float = 1e-5,
                            rng: np.random.Generator | None = None,
                            n_probe: int = 30) -> float:
    """Max relative error between reverse-mode and central-difference
    gradients over randomly probed coordinates. `loss_fn()` must rebuild
    the graph and return a scalar Tensor."""
    for m in modules:
        m.zero_grad()
    loss = loss_fn()
    loss.backward()
    grads = {}
    for mod in modules:
        for k, p in mod.parameters().items():
            grads[k] = p.grad.copy()
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for mod in modules:
        for k, p in mod.parameters().items():
            flat = p.data.ravel()
            n = min(n_probe, flat.size)
            idxs = rng.choice(flat.size, size=n, replace=False)
            for i in idxs:
                orig = flat[i]
                flat[i] = orig + h
                up = float(loss_fn().data)
                flat[i] = orig - h
                dn = float(loss_fn().data)
                flat[i] = orig
                fd = (up - dn) / (2.0 * h)
                an = grads[k].ravel()[i]
                denom = max(abs(fd), abs(an), 1e-8)
                worst = max(worst, abs(fd - an) / denom)
    return worst
