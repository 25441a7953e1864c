"""Dense float64 layers with explicit forward and backward passes.

The networks in this project are fixed layer sequences (plus one sampling
branch), so there is no general autograd graph: every layer caches what its
backward pass needs, and a network walks its layer list in reverse. All math
is 64-bit so central-difference gradient checks at tight tolerances are
meaningful.

Array layout is NCHW: an explicit batch extent, then channels, height, width.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Array = np.ndarray


class ShapeError(ValueError):
    """An input does not match a layer's configured shape."""


class FrozenParameterError(RuntimeError):
    """An optimizer step was attempted on a frozen parameter."""


class NonFiniteGradientError(FloatingPointError):
    """A gradient contains NaN or Inf (training divergence signal)."""


class Param:
    """A learnable array together with its gradient and Adam state."""

    __slots__ = ("name", "value", "grad", "m", "v", "step", "frozen")

    def __init__(self, name: str, value: Array, frozen: bool = False):
        self.name = name
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)
        self.step = 0
        self.frozen = frozen

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.value.shape}, frozen={self.frozen})"


def adam_step(param: Param, grad: Array, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Apply one bias-corrected Adam update to ``param`` in place."""
    if param.frozen:
        raise FrozenParameterError(f"parameter '{param.name}' is frozen")
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if grad.shape != param.value.shape:
        raise ShapeError(
            f"gradient shape {grad.shape} does not match parameter "
            f"'{param.name}' shape {param.value.shape}")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradientError(
            f"non-finite gradient for parameter '{param.name}'")
    param.step += 1
    t = param.step
    param.m = beta1 * param.m + (1.0 - beta1) * grad
    param.v = beta2 * param.v + (1.0 - beta2) * (grad * grad)
    m_hat = param.m / (1.0 - beta1 ** t)
    v_hat = param.v / (1.0 - beta2 ** t)
    param.value -= lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# functional cores (shared by the layer classes and tested directly)
# ---------------------------------------------------------------------------

def _window_views(x: Array):
    """The four quadrant views of 2x2 windows, in row-major window order."""
    return (x[:, :, 0::2, 0::2], x[:, :, 0::2, 1::2],
            x[:, :, 1::2, 0::2], x[:, :, 1::2, 1::2])


def maxpool2_indices(x: Array) -> tuple[Array, Array]:
    """2x2 non-overlapping max pooling with argmax bookkeeping.

    Returns (pooled, indices). ``indices`` holds, per pooled cell, the flat
    position of the max inside its 2x2 window in row-major order (0..3,
    i.e. 2*row + col); ties go to the first element in that scan order.
    """
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 requires even spatial extents, got {h}x{w}")
    stacked = np.stack(_window_views(x))
    idx = stacked.argmax(axis=0)
    out = np.take_along_axis(stacked, idx[None], axis=0)[0]
    return out, idx


def unpool_indices(x: Array, indices: Array, out_hw: tuple[int, int]) -> Array:
    """Scatter pooled values back to their recorded argmax positions.

    The result is zero everywhere except at the recorded index of each 2x2
    window, where it equals the corresponding pooled value.
    """
    n, c, oh, ow = x.shape
    h, w = out_hw
    if indices.shape != x.shape:
        raise ShapeError(
            f"index map shape {indices.shape} does not match input {x.shape}")
    if (h, w) != (2 * oh, 2 * ow):
        raise ShapeError(
            f"output extent {h}x{w} does not match pooled input {oh}x{ow}")
    if indices.min() < 0 or indices.max() > 3:
        raise ValueError("pooling index out of bounds (expected 0..3)")
    out = np.zeros((n, c, h, w))
    for q, view in enumerate(_window_views(out)):
        view += x * (indices == q)
    return out


def gather_pool_indices(grad: Array, indices: Array) -> Array:
    """Collect, per 2x2 window, the gradient entry at the recorded index."""
    out = np.zeros(indices.shape, dtype=np.float64)
    for q, view in enumerate(_window_views(grad)):
        out += view * (indices == q)
    return out


def mfm(x: Array) -> Array:
    """Max-feature-map: split channels in half, take the elementwise max."""
    c = x.shape[1]
    if c % 2:
        raise ShapeError(f"max-feature-map requires an even channel count, got {c}")
    half = c // 2
    return np.maximum(x[:, :half], x[:, half:])


def mfm_backward(grad: Array, x: Array) -> Array:
    """Route the gradient to the winning half; ties go to the first half."""
    half = x.shape[1] // 2
    a, b = x[:, :half], x[:, half:]
    first_wins = a >= b
    return np.concatenate([grad * first_wins, grad * ~first_wins], axis=1)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def _im2col(x: Array, k: int, stride: int, pad: int) -> Array:
    """Channel-major patch matrix: (N, C*k*k, OH*OW)."""
    n, c, h, w = x.shape
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((n, c, k, k, oh, ow))
    for ki in range(k):
        for kj in range(k):
            cols[:, :, ki, kj] = xp[:, :, ki:ki + stride * oh:stride,
                                    kj:kj + stride * ow:stride]
    return cols.reshape(n, c * k * k, oh * ow)


def _corr2d(x: Array, weight: Array, stride: int, pad: int) -> Array:
    """Plain cross-correlation of NCHW input with OIHW weights."""
    n, _, h, w = x.shape
    oc, _, k, _ = weight.shape
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    cols = _im2col(x, k, stride, pad)
    out = np.matmul(weight.reshape(oc, -1), cols)
    return out.reshape(n, oc, oh, ow)


class Conv2d:
    """2D convolution (cross-correlation) over NCHW batches via im2col."""

    def __init__(self, in_ch: int, out_ch: int, ksize: int, stride: int = 1,
                 pad: int = 0, *, name: str = "conv",
                 rng: np.random.Generator | None = None):
        if stride < 1:
            raise ValueError(f"stride must be >= 1, got {stride}")
        if pad < 0:
            raise ValueError(f"pad must be >= 0, got {pad}")
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.ksize = ksize
        self.stride = stride
        self.pad = pad
        self.name = name
        if rng is None:
            w = np.zeros((out_ch, in_ch, ksize, ksize))
        else:
            # He fan-in scaling, the usual choice for conv+ReLU stacks
            std = np.sqrt(2.0 / (in_ch * ksize * ksize))
            w = rng.normal(0.0, std, size=(out_ch, in_ch, ksize, ksize))
        self.weight = Param(f"{name}.weight", w)
        self.bias = Param(f"{name}.bias", np.zeros(out_ch))
        self._cols: Array | None = None
        self._in_shape: tuple[int, ...] | None = None

    def params(self) -> list[Param]:
        return [self.weight, self.bias]

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        k, s, p = self.ksize, self.stride, self.pad
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def forward(self, x: Array) -> Array:
        n, c, h, w = x.shape
        if c != self.in_ch:
            raise ShapeError(
                f"conv '{self.name}': input has {c} channels, kernel expects "
                f"{self.in_ch} (input shape {x.shape})")
        k, s, p = self.ksize, self.stride, self.pad
        oh, ow = self.out_hw(h, w)
        if oh < 1 or ow < 1:
            raise ShapeError(
                f"conv '{self.name}': {h}x{w} input too small for kernel {k} "
                f"with stride {s}, pad {p}")
        cols = _im2col(x, k, s, p)
        out = np.matmul(self.weight.value.reshape(self.out_ch, -1), cols)
        out += self.bias.value[:, None]
        self._cols = cols
        self._in_shape = x.shape
        return out.reshape(n, self.out_ch, oh, ow)

    def backward(self, grad: Array) -> Array:
        assert self._cols is not None, "forward must run before backward"
        n, c, h, w = self._in_shape
        k, s, p = self.ksize, self.stride, self.pad
        oh, ow = self.out_hw(h, w)
        g_mat = grad.reshape(n, self.out_ch, oh * ow)
        dw = np.matmul(g_mat, self._cols.transpose(0, 2, 1)).sum(axis=0)
        self.weight.grad += dw.reshape(self.weight.shape)
        self.bias.grad += grad.sum(axis=(0, 2, 3))
        if s == 1 and k - 1 - p >= 0:
            # input gradient as a correlation with the spatially flipped,
            # channel-swapped kernel
            w_flip = self.weight.value[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            dx = _corr2d(grad, np.ascontiguousarray(w_flip), 1, k - 1 - p)
            # exact-fit stride-1 windows always cover the input
            return dx
        dcols = np.matmul(self.weight.value.reshape(self.out_ch, -1).T, g_mat)
        dcols = dcols.reshape(n, c, k, k, oh, ow)
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p))
        for ki in range(k):
            for kj in range(k):
                dxp[:, :, ki:ki + s * oh:s, kj:kj + s * ow:s] += \
                    dcols[:, :, ki, kj]
        return dxp[:, :, p:p + h, p:p + w] if p else dxp


class MaxPool2x2:
    """2x2/stride-2 max pooling that remembers its argmax positions."""

    def __init__(self):
        self.indices: Array | None = None
        self.in_hw: tuple[int, int] | None = None

    def params(self) -> list[Param]:
        return []

    def forward(self, x: Array) -> Array:
        out, self.indices = maxpool2_indices(x)
        self.in_hw = x.shape[2:]
        return out

    def backward(self, grad: Array) -> Array:
        assert self.indices is not None
        return unpool_indices(grad, self.indices, self.in_hw)


class MaxUnpool2x2:
    """Sparse upsampling using the paired encoder pool's recorded indices."""

    def __init__(self, pool: MaxPool2x2):
        self.pool = pool

    def params(self) -> list[Param]:
        return []

    def forward(self, x: Array) -> Array:
        if self.pool.indices is None:
            raise RuntimeError("paired pool layer has not run forward yet")
        return unpool_indices(x, self.pool.indices, self.pool.in_hw)

    def backward(self, grad: Array) -> Array:
        return gather_pool_indices(grad, self.pool.indices)


class MaxFeatureMap:
    """Channel-halving activation: elementwise max of the two channel halves."""

    def __init__(self):
        self._x: Array | None = None

    def params(self) -> list[Param]:
        return []

    def forward(self, x: Array) -> Array:
        self._x = x
        return mfm(x)

    def backward(self, grad: Array) -> Array:
        assert self._x is not None
        return mfm_backward(grad, self._x)


class ReLU:
    def __init__(self):
        self._mask: Array | None = None

    def params(self) -> list[Param]:
        return []

    def forward(self, x: Array) -> Array:
        self._mask = x > 0
        return x * self._mask

    def backward(self, grad: Array) -> Array:
        assert self._mask is not None
        return grad * self._mask


class Sigmoid:
    """Saturating logistic output, bounding activations to (0, 1)."""

    def __init__(self):
        self._y: Array | None = None

    def params(self) -> list[Param]:
        return []

    def forward(self, x: Array) -> Array:
        y = np.empty_like(x)
        pos = x >= 0
        y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        y[~pos] = ex / (1.0 + ex)
        self._y = y
        return y

    def backward(self, grad: Array) -> Array:
        assert self._y is not None
        return grad * self._y * (1.0 - self._y)


class Dense:
    """Affine map on flattened inputs: y = x @ W.T + b."""

    def __init__(self, in_dim: int, out_dim: int, *, name: str = "fc",
                 rng: np.random.Generator | None = None):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.name = name
        if rng is None:
            w = np.zeros((out_dim, in_dim))
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / in_dim), size=(out_dim, in_dim))
        self.weight = Param(f"{name}.weight", w)
        self.bias = Param(f"{name}.bias", np.zeros(out_dim))
        self._xf: Array | None = None
        self._in_shape: tuple[int, ...] | None = None

    def params(self) -> list[Param]:
        return [self.weight, self.bias]

    def forward(self, x: Array) -> Array:
        n = x.shape[0]
        xf = x.reshape(n, -1)
        if xf.shape[1] != self.in_dim:
            raise ShapeError(
                f"dense '{self.name}': flattened input length {xf.shape[1]} "
                f"does not match weight matrix ({self.in_dim})")
        self._xf = xf
        self._in_shape = x.shape
        return xf @ self.weight.value.T + self.bias.value

    def backward(self, grad: Array) -> Array:
        assert self._xf is not None
        self.weight.grad += grad.T @ self._xf
        self.bias.grad += grad.sum(axis=0)
        return (grad @ self.weight.value).reshape(self._in_shape)


def softmax_cross_entropy(logits: Array, labels: Array) -> tuple[float, Array]:
    """Mean cross-entropy over a batch; returns (loss, grad wrt logits)."""
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -log_probs[np.arange(n), labels].mean()
    grad = np.exp(log_probs)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    tolerance: float
    worst_index: tuple[int, ...]

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} max_rel_err={self.max_rel_err:.3e} "
                f"(tol {self.tolerance:.1e}, worst at {self.worst_index})")


def grad_check(fn, x: Array, tolerance: float = 1e-4,
               step: float = 1e-5) -> GradCheckReport:
    """Compare fn's analytic gradient against central finite differences.

    ``fn`` maps an array to ``(scalar_value, gradient_array)``. The numeric
    gradient is computed coordinate by coordinate with the two-sided formula,
    and the report carries the worst elementwise relative error. The
    denominator is floored so near-zero entries compare on an absolute scale.
    """
    _, analytic = fn(x)
    numeric = np.zeros_like(x, dtype=np.float64)
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xp[idx] += step
        f_plus, _ = fn(xp)
        xm = x.copy()
        xm[idx] -= step
        f_minus, _ = fn(xm)
        numeric[idx] = (f_plus - f_minus) / (2.0 * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-3)
    rel = np.abs(analytic - numeric) / denom
    worst = np.unravel_index(int(np.argmax(rel)), rel.shape)
    max_rel = float(rel[worst])
    return GradCheckReport(max_rel, max_rel < tolerance, tolerance, worst)
