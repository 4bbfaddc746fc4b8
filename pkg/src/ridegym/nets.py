"""Tiny dense networks with manual backprop and Adam.

Everything here is deliberately explicit: gradients of every loss in the
package are analytic and checked against central finite differences.
"""

from __future__ import annotations

import numpy as np


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def init_mlp(
    sizes: list[int],
    rng: np.random.Generator,
    out_bias=None,
    out_scale: float = 1.0,
) -> list[np.ndarray]:
    """Parameters [W0, b0, W1, b1, ...] with tanh-friendly Xavier scaling.

    out_scale shrinks the final layer's weights (policy heads start near
    their bias so the initial behavior is the identity action).
    """
    params: list[np.ndarray] = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        scale = np.sqrt(2.0 / (fan_in + fan_out))
        params.append(rng.normal(0.0, scale, size=(fan_in, fan_out)))
        params.append(np.zeros(fan_out))
    params[-2] *= out_scale
    if out_bias is not None:
        params[-1] = np.array(out_bias, dtype=float, copy=True)
    return params


def mlp_forward(params: list[np.ndarray], x: np.ndarray):
    """Forward pass, tanh hidden layers and a linear head; returns (out, cache)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    acts = [x]
    n_layers = len(params) // 2
    h = x
    for layer in range(n_layers):
        w, b = params[2 * layer], params[2 * layer + 1]
        z = h @ w + b
        h = z if layer == n_layers - 1 else np.tanh(z)
        acts.append(h)
    return h, acts


def mlp_backward(params: list[np.ndarray], acts: list[np.ndarray], grad_out: np.ndarray):
    """Backprop grad_out through the cached activations.

    Returns (grads aligned with params, gradient w.r.t. the input batch).
    """
    n_layers = len(params) // 2
    grads: list[np.ndarray] = [np.zeros_like(p) for p in params]
    delta = np.asarray(grad_out, dtype=float)
    for layer in range(n_layers - 1, -1, -1):
        w = params[2 * layer]
        h_in = acts[layer]
        if layer != n_layers - 1:
            delta = delta * (1.0 - acts[layer + 1] ** 2)  # through tanh
        grads[2 * layer] = h_in.T @ delta
        grads[2 * layer + 1] = delta.sum(axis=0)
        delta = delta @ w.T
    return grads, delta


def flatten(arrays: list[np.ndarray]) -> np.ndarray:
    return np.concatenate([a.ravel() for a in arrays])


def unflatten(flat: np.ndarray, like: list[np.ndarray]) -> list[np.ndarray]:
    out, pos = [], 0
    for a in like:
        out.append(flat[pos : pos + a.size].reshape(a.shape))
        pos += a.size
    return out


class Adam:
    """Adaptive-moment gradient descent over a list of parameter arrays."""

    def __init__(self, params: list[np.ndarray], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
