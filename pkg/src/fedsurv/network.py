"""Feed-forward hazard network with hand-rolled per-sample backpropagation.

The architecture family is fixed (dense layers, SELU hidden activations,
sigmoid output with one unit per time interval), which keeps exact per-sample
gradients cheap without a general autodiff.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

SELU_ALPHA = 1.6732632423543772
SELU_SCALE = 1.0507009873554805

# hazards are clamped away from {0, 1} inside the loss and its gradient
HAZARD_EPS = 1e-7


def selu(z: np.ndarray) -> np.ndarray:
    return SELU_SCALE * np.where(z > 0, z, SELU_ALPHA * np.expm1(z))


def selu_deriv(z: np.ndarray) -> np.ndarray:
    return SELU_SCALE * np.where(z > 0, 1.0, SELU_ALPHA * np.exp(np.minimum(z, 0.0)))


class HazardNetwork:
    """Dense network mapping covariates to per-interval hazard probabilities.

    Parameters live in one flat float64 vector; weight/bias matrices are
    views into it, so in-place updates of ``params`` are visible to forward
    passes. ``layer_dims`` is (input, hidden..., n_intervals).
    """

    def __init__(self, layer_dims: tuple[int, ...], params: np.ndarray):
        dims = tuple(int(d) for d in layer_dims)
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise ValueError(f"bad layer dims {dims}")
        self.layer_dims = dims
        expected = sum(o * i + o for i, o in zip(dims[:-1], dims[1:]))
        params = np.asarray(params, dtype=float)
        if params.shape != (expected,):
            raise ValueError(f"expected {expected} parameters, got {params.shape}")
        self.params = params
        self._slices: list[tuple[np.ndarray, np.ndarray]] = []
        offset = 0
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            w = params[offset : offset + fan_out * fan_in].reshape(fan_out, fan_in)
            offset += fan_out * fan_in
            b = params[offset : offset + fan_out]
            offset += fan_out
            self._slices.append((w, b))

    @classmethod
    def initialize(
        cls, layer_dims: tuple[int, ...], rng: np.random.Generator
    ) -> "HazardNetwork":
        """Fan-in scaled normal weights (std 1/sqrt(fan_in)), zero biases."""
        dims = tuple(int(d) for d in layer_dims)
        chunks = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=fan_out * fan_in)
            chunks.append(w)
            chunks.append(np.zeros(fan_out))
        return cls(dims, np.concatenate(chunks))

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def n_intervals(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_params(self) -> int:
        return self.params.size

    @property
    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return self._slices

    def copy(self) -> "HazardNetwork":
        return HazardNetwork(self.layer_dims, self.params.copy())

    def with_params(self, params: np.ndarray) -> "HazardNetwork":
        return HazardNetwork(self.layer_dims, np.asarray(params, dtype=float).copy())

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Hazards for a single covariate vector, each strictly in (0, 1)."""
        x = np.asarray(x, dtype=float)
        if x.shape != (self.input_dim,):
            raise ValueError(f"expected input of dim {self.input_dim}, got {x.shape}")
        return self.forward_batch(x[None, :])[0]

    def forward_batch(self, x: np.ndarray) -> np.ndarray:
        """Hazards for a batch, shape (n, n_intervals)."""
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ValueError(f"expected (n, {self.input_dim}) inputs, got {x.shape}")
        a = x
        for w, b in self._slices[:-1]:
            a = selu(a @ w.T + b)
        w, b = self._slices[-1]
        h = expit(a @ w.T + b)
        # keep closed-interval float artifacts out of downstream products
        return np.clip(h, 1e-12, 1.0 - 1e-12)

    def checksum(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.params).tobytes()).hexdigest()

    def to_npz(self, path) -> None:
        np.savez(
            path, layer_dims=np.asarray(self.layer_dims), params=self.params
        )

    @classmethod
    def from_npz(cls, path) -> "HazardNetwork":
        data = np.load(path)
        return cls(tuple(int(d) for d in data["layer_dims"]), data["params"])


def nll_loss(hazards: np.ndarray, survived: np.ndarray, failed: np.ndarray) -> float:
    """Negative log-likelihood of one record (or summed over a batch):

        -sum_l [ survived_l * log(1 - h_l) + failed_l * log h_l ]
    """
    h = np.clip(np.asarray(hazards, dtype=float), HAZARD_EPS, 1.0 - HAZARD_EPS)
    s = np.asarray(survived, dtype=float)
    f = np.asarray(failed, dtype=float)
    if h.shape != s.shape or h.shape != f.shape:
        raise ValueError("hazards and indicator vectors must share a shape")
    return float(-np.sum(s * np.log1p(-h) + f * np.log(h)))


def _forward_cached(model: HazardNetwork, x: np.ndarray):
    """Forward pass keeping pre-activations for backprop."""
    pre: list[np.ndarray] = []
    acts: list[np.ndarray] = [x]
    a = x
    for w, b in model.layers[:-1]:
        z = a @ w.T + b
        a = selu(z)
        pre.append(z)
        acts.append(a)
    w, b = model.layers[-1]
    z_out = a @ w.T + b
    hazards = expit(z_out)
    return pre, acts, hazards


def per_sample_gradients(
    model: HazardNetwork,
    x: np.ndarray,
    survived: np.ndarray,
    failed: np.ndarray,
) -> np.ndarray:
    """One full-parameter loss gradient per record, shape (n, n_params).

    Rows sum to the gradient of the summed batch loss. Parameter order
    matches the flat layout of ``HazardNetwork.params``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    s = np.atleast_2d(np.asarray(survived, dtype=float))
    f = np.atleast_2d(np.asarray(failed, dtype=float))
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    if x.shape[1] != model.input_dim:
        raise ValueError(f"expected inputs of dim {model.input_dim}")

    pre, acts, hazards = _forward_cached(model, x)
    hc = np.clip(hazards, HAZARD_EPS, 1.0 - HAZARD_EPS)
    # d(loss)/d(pre-sigmoid): the stable fused form of the clamped loss
    delta = s * hc - f * (1.0 - hc)

    grads = np.empty((n, model.n_params))
    offset = model.n_params
    for layer_idx in range(len(model.layers) - 1, -1, -1):
        w, _ = model.layers[layer_idx]
        a_prev = acts[layer_idx]
        fan_out, fan_in = w.shape
        offset -= fan_out
        grads[:, offset : offset + fan_out] = delta
        offset -= fan_out * fan_in
        np.einsum("no,ni->noi", delta, a_prev, out=grads[
            :, offset : offset + fan_out * fan_in
        ].reshape(n, fan_out, fan_in))
        if layer_idx > 0:
            delta = (delta @ w) * selu_deriv(pre[layer_idx - 1])
    return grads


def batch_gradient(
    model: HazardNetwork,
    x: np.ndarray,
    survived: np.ndarray,
    failed: np.ndarray,
) -> np.ndarray:
    """Gradient of the summed batch loss (single flat vector).

    Cheaper than summing per-sample rows when no clipping is needed.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    s = np.atleast_2d(np.asarray(survived, dtype=float))
    f = np.atleast_2d(np.asarray(failed, dtype=float))
    pre, acts, hazards = _forward_cached(model, x)
    hc = np.clip(hazards, HAZARD_EPS, 1.0 - HAZARD_EPS)
    delta = s * hc - f * (1.0 - hc)

    grad = np.empty(model.n_params)
    offset = model.n_params
    for layer_idx in range(len(model.layers) - 1, -1, -1):
        w, _ = model.layers[layer_idx]
        a_prev = acts[layer_idx]
        fan_out, fan_in = w.shape
        offset -= fan_out
        grad[offset : offset + fan_out] = delta.sum(axis=0)
        offset -= fan_out * fan_in
        grad[offset : offset + fan_out * fan_in] = (delta.T @ a_prev).ravel()
        if layer_idx > 0:
            delta = (delta @ w) * selu_deriv(pre[layer_idx - 1])
    return grad


def batch_nll(
    model: HazardNetwork,
    x: np.ndarray,
    survived: np.ndarray,
    failed: np.ndarray,
) -> float:
    """Summed negative log-likelihood of a batch."""
    h = model.forward_batch(np.atleast_2d(np.asarray(x, dtype=float)))
    hc = np.clip(h, HAZARD_EPS, 1.0 - HAZARD_EPS)
    s = np.atleast_2d(np.asarray(survived, dtype=float))
    f = np.atleast_2d(np.asarray(failed, dtype=float))
    return float(-np.sum(s * np.log1p(-hc) + f * np.log(hc)))


def survival_curve(hazards: np.ndarray) -> np.ndarray:
    """S_l = prod_{j<=l} (1 - h_j); works on (T,) vectors or (n, T) batches."""
    h = np.asarray(hazards, dtype=float)
    return np.cumprod(1.0 - h, axis=-1)
