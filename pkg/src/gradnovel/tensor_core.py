"""Dense layer primitives with explicit forward/backward passes.

Everything is float64 numpy. Layers cache their forward input/output and are
therefore single-sample (or single-batch) objects; clone before sharing across
workers. Per-sample weight gradients are first-class: `per_sample_grads` never
sums over the batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import LayerStateError, ShapeError


def seeded_rng(seed: int) -> np.random.Generator:
    """Deterministic generator; identical seeds give identical streams."""
    return np.random.Generator(np.random.PCG64(seed))


def spawn_rngs(seed: int, count: int) -> list[np.random.Generator]:
    """Independent child generators derived deterministically from one seed."""
    seqs = np.random.SeedSequence(seed).spawn(count)
    return [np.random.Generator(np.random.PCG64(s)) for s in seqs]


def _as_f64(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ShapeError("non-finite values in tensor")
    return a


def stable_sigmoid(v: np.ndarray) -> np.ndarray:
    """Overflow-free logistic function (branches on sign)."""
    v = np.asarray(v, dtype=np.float64)
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


class AffineLayer:
    """y = W x + b with cached input for the backward pass.

    Accepts a single sample (in_dim,) or a batch (n, in_dim). The plain
    `backward` sums weight/bias gradients over the batch (training use);
    `per_sample_grads` keeps the batch axis.
    """

    def __init__(self, weights, bias):
        self.weights = _as_f64(weights)
        self.bias = _as_f64(bias)
        if self.weights.ndim != 2 or self.bias.ndim != 1:
            raise ShapeError("weights must be 2-D and bias 1-D")
        if self.weights.shape[0] != self.bias.shape[0]:
            raise ShapeError(
                f"bias length {self.bias.shape[0]} != output dim {self.weights.shape[0]}"
            )
        self.cached_input: np.ndarray | None = None

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def random_init(cls, out_dim: int, in_dim: int, rng: np.random.Generator) -> "AffineLayer":
        # Glorot-uniform; biases start at zero.
        limit = np.sqrt(6.0 / (in_dim + out_dim))
        w = rng.uniform(-limit, limit, size=(out_dim, in_dim))
        return cls(w, np.zeros(out_dim))

    def clone(self) -> "AffineLayer":
        return AffineLayer(self.weights.copy(), self.bias.copy())

    def forward(self, x) -> np.ndarray:
        x = _as_f64(x)
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"input dim {x.shape[-1]} != layer in_dim {self.in_dim}")
        self.cached_input = x
        return x @ self.weights.T + self.bias

    def backward(self, upstream) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Returns (input_grad, weight_grad, bias_grad); batch grads are summed."""
        if self.cached_input is None:
            raise LayerStateError("backward before forward")
        up = _as_f64(upstream)
        if up.shape[-1] != self.out_dim:
            raise ShapeError(f"upstream dim {up.shape[-1]} != layer out_dim {self.out_dim}")
        x = self.cached_input
        if up.ndim == 1:
            weight_grad = np.outer(up, x)
            bias_grad = up.copy()
        else:
            weight_grad = up.T @ x
            bias_grad = up.sum(axis=0)
        input_grad = up @ self.weights
        return input_grad, weight_grad, bias_grad

    def per_sample_grads(self, upstream) -> tuple[np.ndarray, np.ndarray]:
        """Per-sample (weight_grad, bias_grad); never summed over samples."""
        if self.cached_input is None:
            raise LayerStateError("backward before forward")
        up = _as_f64(upstream)
        x = self.cached_input
        if up.ndim == 1:
            return np.outer(up, x)[None, :, :], up[None, :]
        return np.einsum("ni,nj->nij", up, x), up.copy()


class SigmoidLayer:
    """Elementwise logistic activation; caches its output for backward."""

    def __init__(self):
        self.cached_output: np.ndarray | None = None

    def clone(self) -> "SigmoidLayer":
        return SigmoidLayer()

    def forward(self, x) -> np.ndarray:
        out = stable_sigmoid(_as_f64(x))
        self.cached_output = out
        return out

    def backward(self, upstream) -> np.ndarray:
        if self.cached_output is None:
            raise LayerStateError("backward before forward")
        s = self.cached_output
        return _as_f64(upstream) * s * (1.0 - s)


@dataclass
class GradientSet:
    """Weight/bias gradients of one sample, keyed by layer index."""

    sample_id: int
    weight_grads: dict[int, np.ndarray] = field(default_factory=dict)
    bias_grads: dict[int, np.ndarray] = field(default_factory=dict)

    def flat(self, layer_index: int, include_bias: bool = True) -> np.ndarray:
        w = self.weight_grads[layer_index].ravel()
        if not include_bias:
            return w
        return np.concatenate([w, self.bias_grads[layer_index]])


class Adam:
    """Adam optimizer over a dict of named parameter arrays (updated in place)."""

    def __init__(self, params: dict[str, np.ndarray], lr=1e-3,
                 beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / (1 - b1 ** self.t)
            vhat = self.v[k] / (1 - b2 ** self.t)
            p -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def params_checksum(params: dict[str, np.ndarray]) -> int:
    """Order-independent fingerprint of parameter bytes (mutation detection)."""
    import hashlib

    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name]).tobytes())
    return int.from_bytes(h.digest()[:8], "little")
