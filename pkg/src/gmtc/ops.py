"""Array ops with hand-written gradients.

Everything operates on plain numpy arrays laid out time-major: (T, C) for a
single sequence, (B, T, C) with a leading batch axis. Ops preserve the input
dtype, so training runs in float32 and gradient checks in float64. There is
no autodiff graph; each forward op has a matching *_backward function and the
model wires them together in a fixed reverse pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class ConvParams:
    """Weights of one dilated causal 1-D convolution.

    kernel: (c_out, c_in, k) tap array; tap i multiplies the sample d*i
    steps in the past (tap 0 is the current sample).
    bias: (c_out,). dilation: step between taps, >= 1.
    """

    kernel: np.ndarray
    bias: np.ndarray
    dilation: int = 1

    def __post_init__(self):
        if self.kernel.ndim != 3:
            raise ValueError(f"kernel must be rank 3, got {self.kernel.ndim}")
        if self.bias.ndim != 1 or self.bias.shape[0] != self.kernel.shape[0]:
            raise ValueError("bias must be (c_out,) matching kernel")
        if self.dilation < 1:
            raise ValueError(f"dilation must be >= 1, got {self.dilation}")


def conv1d_causal(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Dilated causal convolution along the time axis.

    out[..., s, o] = bias[o] + sum_i sum_c kernel[o, c, i] * x[..., s - d*i, c]
    with implicit zeros left of the sequence start, so the output has the
    same number of frames as the input and frame s never sees frames > s.

    Args:
        x: (..., T, c_in) input, T >= 1.
        p: convolution parameters; p.kernel c_in must match x.

    Returns:
        (..., T, c_out) array in x's dtype.
    """
    c_out, c_in, k = p.kernel.shape
    if x.ndim < 2 or x.shape[-1] != c_in:
        raise ValueError(f"channel mismatch: x {x.shape} vs kernel c_in {c_in}")
    t = x.shape[-2]
    if t < 1:
        raise ValueError("input must have at least one frame")
    out = x @ p.kernel[:, :, 0].T
    for i in range(1, k):
        lag = p.dilation * i
        if lag >= t:
            break
        out[..., lag:, :] += x[..., : t - lag, :] @ p.kernel[:, :, i].T
    out += p.bias.astype(x.dtype)
    return out


def conv1d_causal_backward(
    x: np.ndarray, p: ConvParams, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of conv1d_causal.

    Args:
        x: forward input (..., T, c_in).
        p: forward parameters.
        grad_out: upstream gradient (..., T, c_out).

    Returns:
        (grad_x, grad_kernel, grad_bias); grad_kernel/grad_bias are summed
        over any batch axes.
    """
    c_out, c_in, k = p.kernel.shape
    if grad_out.shape != x.shape[:-1] + (c_out,):
        raise ValueError("grad_out shape does not match forward output")
    t = x.shape[-2]
    grad_bias = grad_out.reshape(-1, c_out).sum(axis=0)
    grad_kernel = np.zeros_like(p.kernel)
    grad_x = grad_out @ p.kernel[:, :, 0]
    grad_kernel[:, :, 0] = grad_out.reshape(-1, c_out).T @ x.reshape(-1, c_in)
    for i in range(1, k):
        lag = p.dilation * i
        if lag >= t:
            break
        g_lag = grad_out[..., lag:, :]
        x_lag = x[..., : t - lag, :]
        grad_kernel[:, :, i] = g_lag.reshape(-1, c_out).T @ x_lag.reshape(-1, c_in)
        grad_x[..., : t - lag, :] += g_lag @ p.kernel[:, :, i]
    return grad_x, grad_kernel, grad_bias


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def leaky_relu(x: np.ndarray, alpha: float) -> np.ndarray:
    return np.where(x >= 0, x, x * np.asarray(alpha, dtype=x.dtype))


def leaky_relu_backward(x: np.ndarray, alpha: float, grad_out: np.ndarray) -> np.ndarray:
    one = np.asarray(1, dtype=grad_out.dtype)
    return grad_out * np.where(x >= 0, one, np.asarray(alpha, dtype=grad_out.dtype))


def sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign so exp never overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1 / (1 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1 + ex)
    return out


def sigmoid_backward(s: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Backward through sigmoid given its forward output s."""
    return grad_out * s * (1 - s)


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """Mean over the time axis: (..., T, C) -> (..., C)."""
    if x.ndim < 2:
        raise ValueError("expected at least (T, C)")
    return x.mean(axis=-2)


def global_avg_pool_backward(x_shape: tuple[int, ...], grad_out: np.ndarray) -> np.ndarray:
    t = x_shape[-2]
    return np.broadcast_to(grad_out[..., None, :] / t, x_shape).copy()


def dense(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Affine map on the last axis: (..., C) @ w.T + b with w (K, C)."""
    if x.shape[-1] != w.shape[1]:
        raise ValueError(f"channel mismatch: x {x.shape} vs weight {w.shape}")
    return x @ w.T + b.astype(x.dtype)


def dense_backward(
    x: np.ndarray, w: np.ndarray, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    grad_x = grad_out @ w
    g2 = grad_out.reshape(-1, w.shape[0])
    x2 = x.reshape(-1, w.shape[1])
    return grad_x, g2.T @ x2, g2.sum(axis=0)


def softmax(z: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the last axis, max-shifted for stability."""
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs: np.ndarray, label: int) -> float:
    """Negative log-probability of the true class for one distribution."""
    if probs.ndim != 1:
        raise ValueError("cross_entropy takes a single distribution")
    if not 0 <= label < probs.shape[0]:
        raise ValueError(f"label {label} out of range for {probs.shape[0]} classes")
    return float(-np.log(max(float(probs[label]), 1e-30)))


def softmax_cross_entropy(
    logits: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over a batch with the fused gradient.

    Args:
        logits: (B, K) raw scores.
        labels: (B,) int class indices.

    Returns:
        (mean loss, grad wrt logits). The per-sample gradient is
        probs - onehot(label); the returned gradient carries the 1/B of the
        batch mean.
    """
    logits = np.atleast_2d(logits)
    labels = np.atleast_1d(np.asarray(labels))
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError("labels must be (B,) matching logits")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError("label out of range")
    probs = softmax(logits)
    rows = np.arange(n)
    losses = -np.log(np.maximum(probs[rows, labels], 1e-30))
    grad = probs.copy()
    grad[rows, labels] -= 1
    grad /= n
    return float(losses.mean()), grad.astype(logits.dtype)


@dataclass
class AdamState:
    """First/second moment accumulators plus hyperparameters, keyed like params."""

    lr: float = 1e-3
    beta1: float = 0.93
    beta2: float = 0.98
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def init_adam(params: dict, lr: float = 1e-3, beta1: float = 0.93,
              beta2: float = 0.98, eps: float = 1e-8) -> AdamState:
    state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    for name, value in params.items():
        state.m[name] = np.zeros_like(value)
        state.v[name] = np.zeros_like(value)
    return state


def adam_step(params: dict, grads: dict, state: AdamState) -> dict:
    """One bias-corrected Adam update, in place on params.

    params/grads: dicts of same-keyed arrays. Missing grad keys are an error;
    the update is theta -= lr * m_hat / (sqrt(v_hat) + eps).
    """
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for name, theta in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * np.square(g)
        theta -= (state.lr / c1) * m / (np.sqrt(v / c2) + state.eps)
    return params


def xavier_uniform(shape: tuple[int, ...], fan_in: int, fan_out: int,
                   rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    limit = float(np.sqrt(6.0 / (fan_in + fan_out)))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)
