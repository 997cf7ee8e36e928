"""Feed-forward network substrate with analytic gradients and Adam.

A deliberately small engine: fully connected layers, ReLU hidden
activations, and either a linear output head or a "gaussian" head whose
output splits into (mean, log_var) with a saturating clamp on the
log-variance half.  Gradients are exact reverse-mode and are verified
against central finite differences in the test suite.

All forward/backward entry points accept a single vector or a batch
matrix of shape (N, dim); parameter gradients are summed over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, TrainingDivergence
from .gaussmath import LOG_VAR_MAX, LOG_VAR_MIN, DiagGaussian


def split_gaussian_raw(raw: np.ndarray):
    """Split raw head output into (mean, clamped log_var, clamp mask).

    The mask marks entries strictly inside the clamp range; gradients
    pass through the clamp as identity there and are zero outside.
    """
    half = raw.shape[-1] // 2
    mean = raw[..., :half]
    raw_lv = raw[..., half:]
    log_var = np.clip(raw_lv, LOG_VAR_MIN, LOG_VAR_MAX)
    mask = (raw_lv > LOG_VAR_MIN) & (raw_lv < LOG_VAR_MAX)
    return mean, log_var, mask


def merge_gaussian_grad(d_mean: np.ndarray, d_log_var: np.ndarray,
                        mask: np.ndarray) -> np.ndarray:
    """Assemble the raw-output gradient for a gaussian head."""
    return np.concatenate([d_mean, d_log_var * mask], axis=-1)


class Mlp:
    """Fully connected network; ReLU on all but the final layer.

    output_head:
        "linear"   -- final layer output returned as-is
        "gaussian" -- final output dimension must be even; interpreted as
                      (mean, log_var) with the log_var half clamped
    """

    def __init__(self, layer_dims, output_head: str = "linear",
                 rng: np.random.Generator | None = None,
                 input_scale=1.0):
        if len(layer_dims) < 2 or any(d < 1 for d in layer_dims):
            raise ContractViolation(f"bad layer dims {layer_dims}")
        if output_head not in ("linear", "gaussian"):
            raise ContractViolation(f"unknown output head {output_head!r}")
        if output_head == "gaussian" and layer_dims[-1] % 2 != 0:
            raise ContractViolation("gaussian head needs an even output dim")
        self.layer_dims = list(layer_dims)
        self.output_head = output_head
        # Scalar or per-feature vector; broadcasts over the batch axis.
        self.input_scale = np.asarray(input_scale, dtype=np.float64)
        if self.input_scale.ndim > 1 or (
                self.input_scale.ndim == 1
                and self.input_scale.shape[0] != layer_dims[0]):
            raise ContractViolation("input_scale must be scalar or match "
                                    "the input dimension")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
            # He fan-in scaling, appropriate for the ReLU hidden stack.
            w = rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in)
            self.weights.append(w)
            self.biases.append(np.zeros(fan_out))

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def forward_cache(self, x: np.ndarray):
        """Raw forward pass.  Returns (raw_output, cache) with batch support."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        a = np.atleast_2d(x) * self.input_scale
        if a.shape[1] != self.in_dim:
            raise ContractViolation(
                f"input dim {a.shape[1]} does not match {self.in_dim}"
            )
        activations = [a]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w.T + b
            if i < self.n_layers - 1:
                a = np.maximum(z, 0.0)
            else:
                a = z
            activations.append(a)
        cache = (activations, single)
        out = activations[-1][0] if single else activations[-1]
        return out, cache

    def forward(self, x: np.ndarray):
        """Evaluate the network on a single vector.

        Returns a plain vector, or a DiagGaussian for a gaussian head.
        """
        out, _ = self.forward_cache(x)
        if out.ndim != 1:
            raise ContractViolation("forward() expects a single input vector")
        if self.output_head == "gaussian":
            mean, log_var, _ = split_gaussian_raw(out)
            return DiagGaussian(mean, log_var)
        return out

    def backward(self, cache, upstream: np.ndarray):
        """Reverse-mode gradients of <upstream, raw_output>.

        Returns (grads, d_input) where grads is a list of (dW, db) per
        layer (summed over the batch) and d_input matches the input shape.
        """
        activations, single = cache
        up = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
        if up.shape != activations[-1].shape:
            raise ContractViolation(
                f"upstream shape {up.shape} does not match output "
                f"{activations[-1].shape}"
            )
        grads: list[tuple[np.ndarray, np.ndarray]] = [None] * self.n_layers
        delta = up
        for i in range(self.n_layers - 1, -1, -1):
            a_in = activations[i]
            grads[i] = (delta.T @ a_in, delta.sum(axis=0))
            delta = delta @ self.weights[i]
            if i > 0:
                delta = delta * (activations[i] > 0.0)
        d_input = delta * self.input_scale
        if single:
            d_input = d_input[0]
        return grads, d_input

    def named_params(self, prefix: str) -> dict[str, np.ndarray]:
        """Live references to the parameter arrays, keyed by block name."""
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.W{i}"] = w
            out[f"{prefix}.b{i}"] = b
        return out

    def grads_to_dict(self, prefix: str, grads) -> dict[str, np.ndarray]:
        out = {}
        for i, (dw, db) in enumerate(grads):
            out[f"{prefix}.W{i}"] = dw
            out[f"{prefix}.b{i}"] = db
        return out

    def zero_grads(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(np.zeros_like(w), np.zeros_like(b))
                for w, b in zip(self.weights, self.biases)]


def mlp_forward(net: Mlp, x: np.ndarray):
    """Single-vector forward evaluation (vector or DiagGaussian output)."""
    return net.forward(x)


def mlp_gradients(net: Mlp, x: np.ndarray, upstream: np.ndarray):
    """Gradients of <upstream, raw_output> w.r.t. parameters and input."""
    _, cache = net.forward_cache(x)
    return net.backward(cache, upstream)


@dataclass
class AdamState:
    """Adam moment accumulators over a named parameter dict."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState):
    """One Adam descent step, applied in place to `params`.

    Updates only the keys present in `grads`; moment accumulators are
    created lazily with matching shapes.  Raises TrainingDivergence,
    naming the offending block, on any non-finite gradient.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergence(f"non-finite gradient in block {name!r}")
        if name not in params:
            raise ContractViolation(f"unknown parameter block {name!r}")
        if params[name].shape != np.shape(g):
            raise ContractViolation(f"gradient shape mismatch for {name!r}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        params[name] -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return params, state
