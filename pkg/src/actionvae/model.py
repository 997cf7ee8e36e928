"""The learned distributions and the closed-form discrete posteriors.

A model couples five pieces: a trajectory encoder q(z|x), a decoder
p(x|z), a scenario classifier p(y|s), a K-component diagonal-Gaussian
mixture p(z|y) realized as a linear map from one-of-K codes, and a
scenario-conditioned dual encoder q(z|y,s) (shared trunk + K heads, or
K disjoint networks).  The discrete posterior q(y|x,s) is never a
network; it is computed in closed form from the other distributions,
in log space for stability.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation, DegeneratePosterior
from .gaussmath import (
    LOG_VAR_MAX,
    LOG_VAR_MIN,
    _LOG_2PI,
    DiagGaussian,
    LatentPoint,
)
from .neuralnet import Mlp, split_gaussian_raw


class LatentMixture:
    """K diagonal Gaussians over R^D, stored as a linear map on one-of-K codes.

    Selecting component k with the basis code e_k reproduces the stored
    rows exactly, so `component(k)` and `from_code(e_k)` coincide.
    """

    def __init__(self, n_components: int, dim: int,
                 rng: np.random.Generator | None = None):
        if n_components < 1 or dim < 1:
            raise ContractViolation("mixture needs K >= 1 and D >= 1")
        self.n_components = n_components
        self.dim = dim
        rng = rng if rng is not None else np.random.default_rng(0)
        self.means = rng.standard_normal((n_components, dim))
        self.log_vars = np.zeros((n_components, dim))

    def component(self, k: int) -> DiagGaussian:
        if not 0 <= k < self.n_components:
            raise ContractViolation(f"component index {k} out of range")
        return DiagGaussian(self.means[k].copy(), self.log_vars[k].copy())

    def from_code(self, code: np.ndarray) -> DiagGaussian:
        """Apply the linear map to an arbitrary K-vector code."""
        code = np.asarray(code, dtype=np.float64)
        if code.shape != (self.n_components,):
            raise ContractViolation("code length must equal K")
        return DiagGaussian(code @ self.means, code @ self.log_vars)

    def clamped_log_vars(self) -> np.ndarray:
        return np.clip(self.log_vars, LOG_VAR_MIN, LOG_VAR_MAX)

    def clamp_mask(self) -> np.ndarray:
        return (self.log_vars > LOG_VAR_MIN) & (self.log_vars < LOG_VAR_MAX)

    def named_params(self, prefix: str = "mixture") -> dict[str, np.ndarray]:
        return {f"{prefix}.means": self.means, f"{prefix}.log_vars": self.log_vars}


class ActionPosterior:
    """A normalized distribution over the K discrete actions."""

    def __init__(self, probs: np.ndarray):
        probs = np.asarray(probs, dtype=np.float64)
        if probs.ndim != 1:
            raise ContractViolation("probs must be a vector")
        if not np.all(np.isfinite(probs)) or np.any(probs < 0.0):
            raise ContractViolation("probs must be finite and nonnegative")
        if abs(float(probs.sum()) - 1.0) > 1e-9:
            raise ContractViolation("probs must sum to 1")
        self.probs = probs

    @property
    def n_actions(self) -> int:
        return self.probs.size

    def argmax(self) -> int:
        return int(np.argmax(self.probs))


def apply_label_override(qy: ActionPosterior, label: int | None) -> ActionPosterior:
    """Replace the posterior with a one-hot code when a label is known."""
    if label is None:
        return qy
    if not 0 <= label < qy.n_actions:
        raise ContractViolation(f"label {label} out of range")
    probs = np.zeros(qy.n_actions)
    probs[label] = 1.0
    return ActionPosterior(probs)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise DegeneratePosterior("posterior logits are not finite")
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(_log_softmax(logits))


def _cross_entropy_vs_components(mean: np.ndarray, log_var: np.ndarray,
                                 mix: LatentMixture) -> np.ndarray:
    """H(q, p_k) for a batch of diagonal Gaussians against every component.

    mean/log_var have shape (N, D); the result has shape (N, K).
    """
    mu = mix.means[None, :, :]                      # (1, K, D)
    lv = mix.clamped_log_vars()[None, :, :]
    dm = mean[:, None, :] - mu                      # (N, K, D)
    qv = np.exp(log_var)[:, None, :]
    return 0.5 * np.sum(_LOG_2PI + lv + (qv + dm * dm) / np.exp(lv), axis=-1)


class ModelState:
    """All learnable parameters, plus read-only inference operations."""

    def __init__(self, encoder: Mlp, decoder: Mlp, classifier: Mlp,
                 dual_trunk: Mlp | None, dual_heads: list[Mlp],
                 mixture: LatentMixture, dual_shared: bool = True):
        self.encoder = encoder
        self.decoder = decoder
        self.classifier = classifier
        self.dual_trunk = dual_trunk
        self.dual_heads = dual_heads
        self.mixture = mixture
        self.dual_shared = dual_shared
        self.n_actions = mixture.n_components
        self.latent_dim = mixture.dim
        self.traj_dim = decoder.out_dim
        self.scenario_dim = classifier.in_dim
        if encoder.in_dim != decoder.out_dim or encoder.out_dim != 2 * self.latent_dim:
            raise ContractViolation("encoder/decoder dimensions inconsistent")
        if classifier.out_dim != self.n_actions:
            raise ContractViolation("classifier output must be K-way")
        if len(dual_heads) != self.n_actions:
            raise ContractViolation("need exactly K dual heads")
        if dual_shared and dual_trunk is None:
            raise ContractViolation("shared dual encoder needs a trunk")

    # ---- parameter bookkeeping -------------------------------------

    def named_params(self) -> dict[str, np.ndarray]:
        params = {}
        params.update(self.encoder.named_params("encoder"))
        params.update(self.decoder.named_params("decoder"))
        params.update(self.classifier.named_params("classifier"))
        if self.dual_trunk is not None:
            params.update(self.dual_trunk.named_params("dual_trunk"))
        for k, head in enumerate(self.dual_heads):
            params.update(head.named_params(f"dual_head_{k}"))
        params.update(self.mixture.named_params())
        return params

    @staticmethod
    def is_dual_block(name: str) -> bool:
        return name.startswith("dual_trunk.") or name.startswith("dual_head_")

    # ---- single-sample operations ----------------------------------

    def encode_x(self, x: np.ndarray) -> DiagGaussian:
        """q(z|x): encode a trajectory into a latent diagonal Gaussian."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.traj_dim,):
            raise ContractViolation(
                f"trajectory dim {x.shape} does not match {self.traj_dim}"
            )
        return self.encoder.forward(x)

    def decode_z(self, z) -> np.ndarray:
        """p(x|z): decode a latent point to the trajectory mean vector."""
        coords = z.coords if isinstance(z, LatentPoint) else np.asarray(z, float)
        if coords.shape != (self.latent_dim,):
            raise ContractViolation(
                f"latent dim {coords.shape} does not match {self.latent_dim}"
            )
        return self.decoder.forward(coords)

    def prior_y(self, s: np.ndarray) -> ActionPosterior:
        """p(y|s): discrete action probabilities for a scenario."""
        return ActionPosterior(_softmax(self._classifier_logits(s)))

    def _classifier_logits(self, s: np.ndarray) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        if s.shape[-1] != self.scenario_dim:
            raise ContractViolation(
                f"scenario dim {s.shape} does not match {self.scenario_dim}"
            )
        out, _ = self.classifier.forward_cache(s)
        return out

    def mixture_component(self, k: int) -> DiagGaussian:
        """Component k of p(z|y)."""
        return self.mixture.component(k)

    def dual_encode(self, s: np.ndarray, k: int) -> DiagGaussian:
        """q(z|y=k, s): head k applied to the (shared or per-head) features."""
        if not 0 <= k < self.n_actions:
            raise ContractViolation(f"action index {k} out of range")
        s = np.asarray(s, dtype=np.float64)
        if s.shape != (self.scenario_dim,):
            raise ContractViolation("bad scenario dimension")
        feat = self.dual_trunk.forward(s) if self.dual_shared else s
        return self.dual_heads[k].forward(feat)

    def _dual_params_batch(self, S: np.ndarray):
        """(means, log_vars) of q(z|y,s) for all heads, shapes (N, K, D)."""
        S = np.atleast_2d(np.asarray(S, dtype=np.float64))
        if self.dual_shared:
            feat, _ = self.dual_trunk.forward_cache(S)
        else:
            feat = S
        means = np.empty((S.shape[0], self.n_actions, self.latent_dim))
        lvs = np.empty_like(means)
        for k, head in enumerate(self.dual_heads):
            raw, _ = head.forward_cache(feat)
            mean, lv, _ = split_gaussian_raw(raw)
            means[:, k, :] = mean
            lvs[:, k, :] = lv
        return means, lvs

    # ---- closed-form discrete posteriors ---------------------------

    def _encode_params_batch(self, X: np.ndarray):
        raw, _ = self.encoder.forward_cache(np.atleast_2d(X))
        mean, lv, _ = split_gaussian_raw(raw)
        return mean, lv

    def qy_base_batch(self, X: np.ndarray, S: np.ndarray) -> np.ndarray:
        """q(y|x,s) per the base posterior, for a batch.  Shape (N, K)."""
        mean, lv = self._encode_params_batch(X)
        log_prior = _log_softmax(self._classifier_logits(np.atleast_2d(S)))
        ce = _cross_entropy_vs_components(mean, lv, self.mixture)
        return _softmax(log_prior - ce)

    def qy_unified_batch(self, X: np.ndarray, S: np.ndarray) -> np.ndarray:
        """The unified posterior, which adds -KL(q(z|y,s) || p(z|y)) per action."""
        mean, lv = self._encode_params_batch(X)
        log_prior = _log_softmax(self._classifier_logits(np.atleast_2d(S)))
        ce = _cross_entropy_vs_components(mean, lv, self.mixture)
        kl_dual = self._dual_kl_batch(np.atleast_2d(S))
        return _softmax(log_prior - ce - kl_dual)

    def _dual_kl_batch(self, S: np.ndarray) -> np.ndarray:
        """KL(q(z|y,s) || p(z|y)) for every action, shape (N, K)."""
        means, lvs = self._dual_params_batch(S)
        mu = self.mixture.means[None, :, :]
        plv = self.mixture.clamped_log_vars()[None, :, :]
        dlv = lvs - plv
        dm = means - mu
        return 0.5 * np.sum(
            np.exp(dlv) + dm * dm / np.exp(plv) - 1.0 - dlv, axis=-1
        )

    def compute_qy_base(self, x: np.ndarray, s: np.ndarray) -> ActionPosterior:
        """Closed-form q(y|x,s) for the base model."""
        probs = self.qy_base_batch(np.atleast_2d(x), np.atleast_2d(s))[0]
        return ActionPosterior(probs)

    def compute_qy_unified(self, x: np.ndarray, s: np.ndarray) -> ActionPosterior:
        """Closed-form q(y|x,s) for the unified model."""
        probs = self.qy_unified_batch(np.atleast_2d(x), np.atleast_2d(s))[0]
        return ActionPosterior(probs)


def pin_dual_heads_to_priors(m: ModelState) -> ModelState:
    """Make every dual head output exactly its prior mixture component.

    Zeroes the final layer of each head and sets its bias to the stored
    component parameters, so q(z|y,s) == p(z|y) for every scenario.
    """
    for k, head in enumerate(m.dual_heads):
        head.weights[-1][:] = 0.0
        head.biases[-1][:] = np.concatenate(
            [m.mixture.means[k], m.mixture.clamped_log_vars()[k]])
    return m


def build_model(n_actions: int, latent_dim: int, traj_dim: int,
                scenario_dim: int, hidden_width: int = 64,
                hidden_layers: int = 2, dual_shared: bool = True,
                rng: np.random.Generator | None = None,
                encoder_input_scale: float = 1.0,
                scenario_input_scale: float = 1.0) -> ModelState:
    """Construct a freshly initialized ModelState with consistent shapes."""
    rng = rng if rng is not None else np.random.default_rng(0)
    hidden = [hidden_width] * hidden_layers
    encoder = Mlp([traj_dim, *hidden, 2 * latent_dim], "gaussian", rng,
                  input_scale=encoder_input_scale)
    decoder = Mlp([latent_dim, *hidden, traj_dim], "linear", rng)
    classifier = Mlp([scenario_dim, *hidden, n_actions], "linear", rng,
                     input_scale=scenario_input_scale)
    if dual_shared:
        trunk = Mlp([scenario_dim, *hidden, hidden_width], "linear", rng,
                    input_scale=scenario_input_scale)
        heads = [Mlp([hidden_width, hidden_width, 2 * latent_dim], "gaussian", rng)
                 for _ in range(n_actions)]
    else:
        trunk = None
        heads = [Mlp([scenario_dim, *hidden, 2 * latent_dim], "gaussian", rng,
                     input_scale=scenario_input_scale)
                 for _ in range(n_actions)]
    mixture = LatentMixture(n_actions, latent_dim, rng)
    return ModelState(encoder, decoder, classifier, trunk, heads, mixture,
                      dual_shared=dual_shared)
