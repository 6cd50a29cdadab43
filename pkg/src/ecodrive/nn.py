"""Minimal dense-network machinery: tanh MLPs, orthogonal init, Adam.

Float64 throughout, single threaded, and fully deterministic per seed; the
analytic backward pass is verified against central finite differences in the
test suite.
"""

from __future__ import annotations

import numpy as np


def orthogonal(rng: np.random.Generator, n_in: int, n_out: int, gain: float = 1.0) -> np.ndarray:
    """Orthogonal weight matrix: orthonormal columns when n_in >= n_out, else rows."""
    a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))  # fix QR sign ambiguity
    if n_in < n_out:
        q = q.T
    return gain * q


class MLP:
    """Fully connected net with tanh hidden layers and a linear output layer."""

    def __init__(self, sizes: list[int], rng: np.random.Generator, out_gain: float = 1.0):
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        self.sizes = list(sizes)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            gain = out_gain if i == len(sizes) - 2 else 1.0
            self.weights.append(orthogonal(rng, n_in, n_out, gain))
            self.biases.append(np.zeros(n_out))

    def forward(self, x: np.ndarray, cache: list | None = None) -> np.ndarray:
        """x: (batch, in) -> (batch, out). Pass a list to capture activations."""
        h = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if cache is not None:
            cache.append(h)
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W + b
            if i != last:
                h = np.tanh(h)
            if cache is not None:
                cache.append(h)
        return h

    def backward(self, cache: list, grad_out: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Gradients of sum(grad_out * output) w.r.t. every (W, b)."""
        grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(self.weights)
        g = np.atleast_2d(np.asarray(grad_out, dtype=np.float64))
        last = len(self.weights) - 1
        for i in range(last, -1, -1):
            h_in = cache[i]
            if i != last:
                g = g * (1.0 - cache[i + 1] ** 2)  # tanh'
            grads[i] = (h_in.T @ g, g.sum(axis=0))
            if i > 0:
                g = g @ self.weights[i].T
        return grads

    # -- flat parameter views for checkpoints and optimizers ----------------

    def parameters(self) -> list[np.ndarray]:
        params = []
        for W, b in zip(self.weights, self.biases):
            params.extend([W, b])
        return params

    def flatten(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.parameters()])

    def load_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        offset = 0
        for p in self.parameters():
            p[...] = flat[offset:offset + p.size].reshape(p.shape)
            offset += p.size
        if offset != flat.size:
            raise ValueError(f"flat vector length {flat.size} != parameter count {offset}")


class Adam:
    """Adam over a list of parameter arrays, updated in place."""

    def __init__(self, params: list[np.ndarray], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay  # decoupled, applied pre-step
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray], lr_scale: float = 1.0) -> None:
        self.t += 1
        b1, b2 = self.betas
        lr = self.lr * lr_scale
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if self.weight_decay:
                p *= 1.0 - lr * self.weight_decay
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            p -= lr * mhat / (np.sqrt(vhat) + self.eps)
